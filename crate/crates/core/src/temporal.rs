//! Gated dilated causal convolution block.
//!
//! `H_te = Conv1x1(tanh(H_gm * W_dc1) ⊙ sigmoid(H_gm * W_dc2))`, convolving
//! along time independently for every (location, source) with left zero
//! padding so the time extent is preserved.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GmrlError, Result};
use crate::tensor::{Graph, Init, ParamId, ParamStore, Shape, Var};

/// Dilation of layer `depth` (zero-based): 2, 4, 8, 16, ...
pub fn dilation_for_depth(depth: usize) -> usize {
    2usize.saturating_pow(depth as u32 + 1)
}

/// Time steps visible to the output of a stack of `dilations.len()` layers.
pub fn receptive_field(kernel_size: usize, dilations: &[usize]) -> usize {
    1 + dilations
        .iter()
        .map(|d| d * kernel_size.saturating_sub(1))
        .sum::<usize>()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeConfig {
    /// Output channels d_k; the block consumes 2·d_k.
    pub channels: usize,
    pub kernel_size: usize,
    pub dilation: usize,
}

#[derive(Debug, Clone)]
pub struct TeLayer {
    pub cfg: TeConfig,
    w_filter: ParamId,
    w_gate: ParamId,
    w_out: ParamId,
    b_out: ParamId,
}

/// Intermediate values of one block, kept for diagnostics and tests.
#[derive(Debug, Clone, Copy)]
pub struct TeOutput {
    /// `(B, T, L, S, d_k)`
    pub h_te: Var,
    /// Sigmoid gate before the product, `(B, T, L·S, d_k)`.
    pub gate: Var,
}

impl TeLayer {
    pub fn new(cfg: TeConfig, prefix: &str, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        if cfg.channels == 0 || cfg.kernel_size == 0 || cfg.dilation == 0 {
            return Err(GmrlError::Config("temporal encoder extents must be positive".into()));
        }
        let c = cfg.channels;
        let conv = Shape::new(vec![cfg.kernel_size, 2 * c, c])?;
        let conv_init = Init::UniformScaled {
            fan_in: cfg.kernel_size * 2 * c,
        };
        Ok(TeLayer {
            cfg,
            w_filter: store.register(format!("{prefix}.w_dc1"), conv.clone(), conv_init, rng)?,
            w_gate: store.register(format!("{prefix}.w_dc2"), conv, conv_init, rng)?,
            w_out: store.register(
                format!("{prefix}.w_1x1"),
                Shape::new(vec![c, c])?,
                Init::UniformScaled { fan_in: c },
                rng,
            )?,
            b_out: store.register(format!("{prefix}.b_1x1"), Shape::new(vec![c])?, Init::Zeros, rng)?,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w_filter, self.w_gate, self.w_out, self.b_out]
    }

    /// `h_gm: (B, T, L, S, 2·d_k) -> (B, T, L, S, d_k)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h_gm: Var) -> Result<TeOutput> {
        let dims = g.shape(h_gm).dims().to_vec();
        let c = self.cfg.channels;
        if dims.len() != 5 || dims[4] != 2 * c {
            return Err(GmrlError::ShapeMismatch {
                op: "te_forward",
                lhs: g.shape(h_gm).clone(),
                rhs: Shape::new(vec![self.cfg.kernel_size, 2 * c, c])?,
            });
        }
        let (b, t, l, s) = (dims[0], dims[1], dims[2], dims[3]);
        let x = g.reshape(h_gm, &[b, t, l * s, 2 * c])?;
        let wf = g.param(store, self.w_filter)?;
        let wg = g.param(store, self.w_gate)?;
        let filt = g.dilated_causal_conv1d(x, wf, self.cfg.dilation)?;
        let filt = g.tanh(filt)?;
        let gate_pre = g.dilated_causal_conv1d(x, wg, self.cfg.dilation)?;
        let gate = g.sigmoid(gate_pre)?;
        let glu = g.mul(filt, gate)?;
        let wo = g.param(store, self.w_out)?;
        let bo = g.param(store, self.b_out)?;
        let y = g.matmul(glu, wo)?;
        let y = g.add_bias(y, bo)?;
        let h_te = g.reshape(y, &[b, t, l, s, c])?;
        Ok(TeOutput { h_te, gate })
    }
}
