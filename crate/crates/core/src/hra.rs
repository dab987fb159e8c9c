//! Hidden representation augmenter: attention over a learned memory bank.
//!
//! The flattened skip representation is projected to a query, scored against
//! every memory record with an unscaled dot product, and the softmax-weighted
//! record average is mapped through `W_V` and broadcast to every
//! (location, source) before being appended on the channel axis.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GmrlError, Result};
use crate::tensor::{Graph, Init, ParamId, ParamStore, Shape, Var};

/// Half-width of the uniform memory bank initialization.
pub const MEMORY_INIT_BOUND: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HraConfig {
    pub locations: usize,
    pub sources: usize,
    /// d_k
    pub channels: usize,
    /// m
    pub slots: usize,
    /// d_m
    pub dim: usize,
    /// Query each (location, source) separately with a shared `d_k -> d_m`
    /// projection instead of one query from the flattened representation.
    pub per_position_query: bool,
}

#[derive(Debug, Clone)]
pub struct MemoryBank {
    pub cfg: HraConfig,
    memory: ParamId,
    w_q: ParamId,
    b_q: ParamId,
    w_v: ParamId,
    b_v: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct HraOutput {
    /// `(B, L, S, d_k + d_m)`
    pub h_aug: Var,
    /// Attention weights, `(B, m)` or `(B, L, S, m)` per position.
    pub phi: Var,
    /// Memory read-out before `W_V`, `(B, d_m)` or `(B, L, S, d_m)`.
    pub read: Var,
}

impl MemoryBank {
    pub fn new(cfg: HraConfig, prefix: &str, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        if [cfg.locations, cfg.sources, cfg.channels, cfg.slots, cfg.dim].contains(&0) {
            return Err(GmrlError::Config("memory bank extents must be positive".into()));
        }
        let q_in = if cfg.per_position_query {
            cfg.channels
        } else {
            cfg.locations * cfg.sources * cfg.channels
        };
        let mut reg = |name: &str, dims: Vec<usize>, init: Init| {
            store.register(format!("{prefix}.{name}"), Shape::new(dims)?, init, rng)
        };
        Ok(MemoryBank {
            cfg,
            memory: reg("memory", vec![cfg.slots, cfg.dim], Init::Uniform { bound: MEMORY_INIT_BOUND })?,
            w_q: reg("w_q", vec![q_in, cfg.dim], Init::UniformScaled { fan_in: q_in })?,
            b_q: reg("b_q", vec![cfg.dim], Init::Zeros)?,
            w_v: reg("w_v", vec![cfg.dim, cfg.dim], Init::UniformScaled { fan_in: cfg.dim })?,
            b_v: reg("b_v", vec![cfg.dim], Init::Zeros)?,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.memory, self.w_q, self.b_q, self.w_v, self.b_v]
    }

    /// `h_sc: (B, L, S, d_k) -> (B, L, S, d_k + d_m)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h_sc: Var) -> Result<HraOutput> {
        let cfg = self.cfg;
        let dims = g.shape(h_sc).dims().to_vec();
        if dims.len() != 4 || dims[1..] != [cfg.locations, cfg.sources, cfg.channels] {
            return Err(GmrlError::ShapeMismatch {
                op: "hra_forward",
                lhs: g.shape(h_sc).clone(),
                rhs: store.value(self.w_q).shape().clone(),
            });
        }
        let b = dims[0];
        let memory = g.param(store, self.memory)?;
        let mem_t = g.permute(memory, &[1, 0])?;
        let w_q = g.param(store, self.w_q)?;
        let b_q = g.param(store, self.b_q)?;
        let w_v = g.param(store, self.w_v)?;
        let b_v = g.param(store, self.b_v)?;

        let query_in = if cfg.per_position_query {
            h_sc
        } else {
            g.reshape(h_sc, &[b, cfg.locations * cfg.sources * cfg.channels])?
        };
        let q = g.matmul(query_in, w_q)?;
        let q = g.add_bias(q, b_q)?;
        let scores = g.matmul(q, mem_t)?;
        let last = g.shape(scores).rank() - 1;
        let phi = g.softmax(scores, last)?;
        let read = g.matmul(phi, memory)?;
        let h_me = g.matmul(read, w_v)?;
        let h_me = g.add_bias(h_me, b_v)?;
        let h_me = if cfg.per_position_query {
            h_me
        } else {
            let one = g.reshape(h_me, &[b, 1, 1, cfg.dim])?;
            g.broadcast_to(one, &[b, cfg.locations, cfg.sources, cfg.dim])?
        };
        let h_aug = g.concat(&[h_sc, h_me], 3)?;
        Ok(HraOutput { h_aug, phi, read })
    }
}
