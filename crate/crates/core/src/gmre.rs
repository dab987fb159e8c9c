//! Gaussian mixture representation extractor.
//!
//! Every channel `i` of a representation `H: (T, L, S, d_k)` gets its own
//! K-component mixture whose weights, means and variances are linear
//! functions of the whole channel slice `vec(H[..., i])`:
//!
//! ```text
//! alpha[k, i]  = softmax_k(W_alpha[k, i] · vec(H[..., i]))
//! mu[k, i]     = W_mu[k, i] · vec(H[..., i]) + b_mu[k, i]
//! sigma2[k, i] = exp(W_sigma[k, i] · vec(H[..., i]) + b_sigma[k, i])
//! ```
//!
//! Each scalar is assigned to the component with the largest posterior
//! responsibility and normalized by that component's mean and standard
//! deviation (Cluster Norm). The output concatenates `H` with the normalized
//! copy along channels. The cluster objective is the channel-averaged
//! `KL(Q || P̄) - E[gamma · log N]` where `Q` averages responsibilities over
//! the batch and all positions and `P̄` averages the mixture weights over the
//! batch.
//!
//! Internally a batch is carried as `(B, T, L, S, C)`, flattened to
//! `(B, P, C)` with `P = T·L·S` for the mixture computations, which are laid
//! out as `(B, P, K, C)`.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GmrlError, Result};
use crate::tensor::{Graph, Init, ParamId, ParamStore, Shape, Tensor, Var};

/// Floor applied to averaged distributions inside the KL logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlMode {
    /// `Q` and `P̄` are averaged over the whole mini-batch before the KL.
    #[default]
    BatchAverage,
    /// KL of each sample's averaged posterior against its own prior, then
    /// averaged over the batch.
    PerSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignMode {
    /// Bayes posterior argmax under the learned mixture.
    #[default]
    Posterior,
    /// Nearest of K randomly initialized, learnable centers per channel
    /// (the hard k-means ablation). There is no probabilistic model: the
    /// normalized copy is `H - center` and the cluster loss is the mean
    /// squared distance to the assigned center.
    NearestCenter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmreConfig {
    /// Mixture components K.
    pub components: usize,
    /// Channels d_k.
    pub channels: usize,
    /// Positions per channel slice, T·L·S.
    pub positions: usize,
    pub eps: f64,
    pub kl_mode: KlMode,
    pub assign_mode: AssignMode,
}

#[derive(Debug, Clone)]
pub struct GmreLayer {
    pub cfg: GmreConfig,
    w_alpha: Option<ParamId>,
    w_mu: Option<ParamId>,
    w_sigma: Option<ParamId>,
    b_mu: Option<ParamId>,
    b_sigma: Option<ParamId>,
    centers: Option<ParamId>,
}

/// Graph handles of the per-sample mixture parameters, each `(B, K, C)`.
#[derive(Debug, Clone, Copy)]
pub struct MixtureVars {
    pub alpha: Var,
    pub log_alpha: Var,
    pub mu: Var,
    pub log_var: Var,
    pub sigma2: Var,
}

/// Concrete mixture parameters of a batch, each `(B, K, C)`.
#[derive(Debug, Clone)]
pub struct MixtureParams {
    pub alpha: Tensor,
    pub mu: Tensor,
    pub sigma2: Tensor,
}

/// Responsibilities `(B, P, K, C)` and the argmax component of every scalar,
/// laid out `(B, P, C)`.
#[derive(Debug, Clone)]
pub struct PosteriorField {
    pub gamma: Tensor,
    pub assign: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct GmreOutput {
    /// `(B, T, L, S, 2C)`: input channels followed by their normalized copy.
    pub h_gm: Var,
    /// `(B, T, L, S, C)`
    pub h_hat: Var,
    pub kl: Var,
    /// Expected negative log-likelihood (or k-means distance, see [`AssignMode`]).
    pub nll: Var,
    pub total: Var,
    /// Assigned component per scalar, `(B, P, C)`.
    pub assign: Vec<usize>,
    /// Smallest gap between the two largest responsibilities over the batch
    /// (distance gap for the k-means variant).
    pub min_margin: f64,
    pub mixture: Option<MixtureVars>,
    /// `(B, P, K, C)`
    pub gamma: Option<Var>,
}

impl GmreLayer {
    pub fn new(cfg: GmreConfig, prefix: &str, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        if cfg.components == 0 || cfg.channels == 0 || cfg.positions == 0 {
            return Err(GmrlError::Config("GMRE extents must be positive".into()));
        }
        if !(cfg.eps > 0.0) {
            return Err(GmrlError::Config(format!("GMRE eps must be positive, got {}", cfg.eps)));
        }
        let (k, c, p) = (cfg.components, cfg.channels, cfg.positions);
        let weights = Shape::new(vec![k, c, p])?;
        let biases = Shape::new(vec![k, c])?;
        let scaled = Init::UniformScaled { fan_in: p };
        let mut layer = GmreLayer {
            cfg,
            w_alpha: None,
            w_mu: None,
            w_sigma: None,
            b_mu: None,
            b_sigma: None,
            centers: None,
        };
        match cfg.assign_mode {
            AssignMode::Posterior => {
                layer.w_alpha = Some(store.register(format!("{prefix}.w_alpha"), weights.clone(), scaled, rng)?);
                layer.w_mu = Some(store.register(format!("{prefix}.w_mu"), weights.clone(), scaled, rng)?);
                layer.w_sigma = Some(store.register(format!("{prefix}.w_sigma"), weights, scaled, rng)?);
                layer.b_mu = Some(store.register(format!("{prefix}.b_mu"), biases.clone(), Init::Zeros, rng)?);
                layer.b_sigma = Some(store.register(format!("{prefix}.b_sigma"), biases, Init::Zeros, rng)?);
            }
            AssignMode::NearestCenter => {
                layer.centers = Some(store.register(
                    format!("{prefix}.centers"),
                    biases,
                    Init::Uniform { bound: 1.0 },
                    rng,
                )?);
            }
        }
        Ok(layer)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [self.w_alpha, self.w_mu, self.w_sigma, self.b_mu, self.b_sigma, self.centers]
            .into_iter()
            .flatten()
            .collect()
    }

    fn check_input(&self, g: &Graph, h: Var) -> Result<(usize, Vec<usize>)> {
        let dims = g.shape(h).dims().to_vec();
        let ok = dims.len() == 5 && dims[1] * dims[2] * dims[3] == self.cfg.positions && dims[4] == self.cfg.channels;
        if !ok {
            return Err(GmrlError::ShapeMismatch {
                op: "gmre",
                lhs: g.shape(h).clone(),
                rhs: Shape::new(vec![self.cfg.positions, self.cfg.channels])?,
            });
        }
        Ok((dims[0], dims))
    }

    /// Per-channel linear scores `(B, K, C)` of `h_flat: (B, P, C)` under
    /// weights `(K, C, P)`.
    fn channel_scores(&self, g: &mut Graph, store: &ParamStore, h_cbp: Var, w: ParamId) -> Result<Var> {
        let w = g.param(store, w)?;
        let w_cpk = g.permute(w, &[1, 2, 0])?;
        let s_cbk = g.batched_matmul(h_cbp, w_cpk)?;
        g.permute(s_cbk, &[1, 2, 0])
    }

    /// Mixture weights, means and variances of every sample in the batch.
    pub fn mixture_params(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<MixtureVars> {
        let (b, _) = self.check_input(g, h)?;
        let (w_alpha, w_mu, w_sigma, b_mu, b_sigma) = match (self.w_alpha, self.w_mu, self.w_sigma, self.b_mu, self.b_sigma) {
            (Some(a), Some(m), Some(s), Some(bm), Some(bs)) => (a, m, s, bm, bs),
            _ => return Err(GmrlError::Config("mixture parameters are not used in nearest-center mode".into())),
        };
        let (k, c, p) = (self.cfg.components, self.cfg.channels, self.cfg.positions);
        let flat = g.reshape(h, &[b, p, c])?;
        let h_cbp = g.permute(flat, &[2, 0, 1])?;

        let logits = self.channel_scores(g, store, h_cbp, w_alpha)?;
        let alpha = g.softmax(logits, 1)?;
        let log_alpha = g.log_softmax(logits, 1)?;

        let mu_lin = self.channel_scores(g, store, h_cbp, w_mu)?;
        let bm = g.param(store, b_mu)?;
        let bm = g.reshape(bm, &[1, k, c])?;
        let mu = g.add(mu_lin, bm)?;

        let sig_lin = self.channel_scores(g, store, h_cbp, w_sigma)?;
        let bs = g.param(store, b_sigma)?;
        let bs = g.reshape(bs, &[1, k, c])?;
        let log_var = g.add(sig_lin, bs)?;
        let sigma2 = g.exp(log_var)?;
        Ok(MixtureVars {
            alpha,
            log_alpha,
            mu,
            log_var,
            sigma2,
        })
    }

    /// Runs the extractor on `h: (B, T, L, S, C)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<GmreOutput> {
        match self.cfg.assign_mode {
            AssignMode::Posterior => self.forward_mixture(g, store, h),
            AssignMode::NearestCenter => self.forward_centers(g, store, h),
        }
    }

    fn forward_mixture(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<GmreOutput> {
        let (b, dims) = self.check_input(g, h)?;
        let (k, c, p) = (self.cfg.components, self.cfg.channels, self.cfg.positions);
        let mix = self.mixture_params(g, store, h)?;
        let flat = g.reshape(h, &[b, p, c])?;

        // log N(h | mu_k, sigma2_k) for every (sample, position, component, channel)
        let h4 = g.reshape(flat, &[b, p, 1, c])?;
        let mu4 = g.reshape(mix.mu, &[b, 1, k, c])?;
        let lv4 = g.reshape(mix.log_var, &[b, 1, k, c])?;
        let diff = g.sub(h4, mu4)?;
        let sq = g.mul(diff, diff)?;
        let neg_lv = g.scale(lv4, -1.0)?;
        let inv_var = g.exp(neg_lv)?;
        let z2 = g.mul(sq, inv_var)?;
        let half_z2 = g.scale(z2, -0.5)?;
        let half_lv = g.scale(lv4, -0.5)?;
        let log_n = g.add(half_z2, half_lv)?;
        let log_n = g.add_scalar(log_n, -HALF_LN_2PI)?;

        let la4 = g.reshape(mix.log_alpha, &[b, 1, k, c])?;
        let log_joint = g.add(log_n, la4)?;
        let gamma = g.softmax(log_joint, 2)?;

        let (assign, min_margin) = argmax_assign(g.value(log_joint), g.value(gamma));

        // Cluster Norm: selection is a constant, gradients reach the chosen
        // component's mean and deviation only.
        let mu_sel = g.gather(mix.mu, 1, &assign, &[b, p, c])?;
        let half_log_var = g.scale(mix.log_var, 0.5)?;
        let sigma = g.exp(half_log_var)?;
        let sigma_sel = g.gather(sigma, 1, &assign, &[b, p, c])?;
        let centered = g.sub(flat, mu_sel)?;
        let denom = g.add_scalar(sigma_sel, self.cfg.eps)?;
        let h_hat = g.div(centered, denom)?;
        let h_hat = g.reshape(h_hat, &dims)?;
        let h_gm = g.concat(&[h, h_hat], 4)?;

        let (kl, nll) = self.cluster_loss(g, gamma, log_n, mix.alpha)?;
        let total = g.add(kl, nll)?;
        Ok(GmreOutput {
            h_gm,
            h_hat,
            kl,
            nll,
            total,
            assign,
            min_margin,
            mixture: Some(mix),
            gamma: Some(gamma),
        })
    }

    /// Channel-averaged KL between averaged posteriors and averaged priors plus
    /// the expected negative component log-likelihood.
    ///
    /// `gamma` and `log_n` are `(B, P, K, C)`, `alpha` is `(B, K, C)`.
    pub fn cluster_loss(&self, g: &mut Graph, gamma: Var, log_n: Var, alpha: Var) -> Result<(Var, Var)> {
        let dims = g.shape(gamma).dims().to_vec();
        let (b, p, k, c) = (dims[0], dims[1], dims[2], dims[3]);
        let q_b = g.mean_axis(gamma, 1)?; // (B, 1, K, C)
        let kl = match self.cfg.kl_mode {
            KlMode::BatchAverage => {
                let q = g.mean_axis(q_b, 0)?;
                let q = g.reshape(q, &[k, c])?;
                let prior = g.mean_axis(alpha, 0)?;
                let prior = g.reshape(prior, &[k, c])?;
                let kl_sum = kl_sum(g, q, prior)?;
                g.scale(kl_sum, 1.0 / c as f64)?
            }
            KlMode::PerSample => {
                let q = g.reshape(q_b, &[b, k, c])?;
                let kl_sum = kl_sum(g, q, alpha)?;
                g.scale(kl_sum, 1.0 / (b * c) as f64)?
            }
        };
        let weighted = g.mul(gamma, log_n)?;
        let s = g.sum_all(weighted)?;
        let nll = g.scale(s, -1.0 / (b * p * c) as f64)?;
        Ok((kl, nll))
    }

    fn forward_centers(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<GmreOutput> {
        let (b, dims) = self.check_input(g, h)?;
        let (k, c, p) = (self.cfg.components, self.cfg.channels, self.cfg.positions);
        let centers_id = self
            .centers
            .ok_or_else(|| GmrlError::Config("nearest-center mode without centers".into()))?;
        let centers = g.param(store, centers_id)?;
        let flat = g.reshape(h, &[b, p, c])?;

        let hv = g.value(flat).data();
        let cv = g.value(centers).data();
        let mut assign = vec![0usize; b * p * c];
        let mut min_margin = f64::INFINITY;
        for (pos, slot) in assign.iter_mut().enumerate() {
            let ch = pos % c;
            let x = hv[pos];
            let (mut best, mut best_d, mut second_d) = (0, f64::INFINITY, f64::INFINITY);
            for kk in 0..k {
                let d = (x - cv[kk * c + ch]).abs();
                if d < best_d {
                    second_d = best_d;
                    best_d = d;
                    best = kk;
                } else if d < second_d {
                    second_d = d;
                }
            }
            *slot = best;
            if k > 1 {
                min_margin = min_margin.min(second_d - best_d);
            }
        }

        let c3 = g.reshape(centers, &[1, k, c])?;
        let c3 = g.broadcast_to(c3, &[b, k, c])?;
        let sel = g.gather(c3, 1, &assign, &[b, p, c])?;
        let centered = g.sub(flat, sel)?;
        let h_hat = g.reshape(centered, &dims)?;
        let h_gm = g.concat(&[h, h_hat], 4)?;
        let sq = g.mul(centered, centered)?;
        let inertia = g.mean_all(sq)?;
        let zero = g.constant(Tensor::scalar(0.0))?;
        let total = g.add(zero, inertia)?;
        Ok(GmreOutput {
            h_gm,
            h_hat,
            kl: zero,
            nll: inertia,
            total,
            assign,
            min_margin,
            mixture: None,
            gamma: None,
        })
    }

    /// Reads the concrete mixture parameters out of a finished forward pass.
    pub fn mixture_values(g: &Graph, out: &GmreOutput) -> Option<MixtureParams> {
        out.mixture.map(|m| MixtureParams {
            alpha: g.value(m.alpha).clone(),
            mu: g.value(m.mu).clone(),
            sigma2: g.value(m.sigma2).clone(),
        })
    }

    pub fn posterior_values(g: &Graph, out: &GmreOutput) -> Option<PosteriorField> {
        out.gamma.map(|gamma| PosteriorField {
            gamma: g.value(gamma).clone(),
            assign: out.assign.clone(),
        })
    }
}

/// `sum(q * (log q - log p))` with both distributions floored at
/// [`PROB_FLOOR`] inside the logarithms.
fn kl_sum(g: &mut Graph, q: Var, p: Var) -> Result<Var> {
    let qc = g.clamp_min(q, PROB_FLOOR)?;
    let log_q = g.log(qc)?;
    let pc = g.clamp_min(p, PROB_FLOOR)?;
    let log_p = g.log(pc)?;
    let ratio = g.sub(log_q, log_p)?;
    let terms = g.mul(q, ratio)?;
    g.sum_all(terms)
}

/// Argmax over the component axis of `(B, P, K, C)` log-joint terms, plus
/// the smallest top-two responsibility gap.
fn argmax_assign(log_joint: &Tensor, gamma: &Tensor) -> (Vec<usize>, f64) {
    let d = log_joint.dims();
    let (b, p, k, c) = (d[0], d[1], d[2], d[3]);
    let (lj, gm) = (log_joint.data(), gamma.data());
    let mut assign = vec![0usize; b * p * c];
    let mut min_margin = f64::INFINITY;
    for bp in 0..b * p {
        for ch in 0..c {
            let at = |kk: usize| (bp * k + kk) * c + ch;
            let mut best = 0;
            for kk in 1..k {
                if lj[at(kk)] > lj[at(best)] {
                    best = kk;
                }
            }
            assign[bp * c + ch] = best;
            if k > 1 {
                let second = (0..k).filter(|&kk| kk != best).map(|kk| gm[at(kk)]).fold(0.0, f64::max);
                min_margin = min_margin.min(gm[at(best)] - second);
            }
        }
    }
    (assign, min_margin)
}

/// `log N(x | mu, sigma2)`.
pub fn log_normal_density(x: f64, mu: f64, sigma2: f64) -> f64 {
    -0.5 * ((x - mu) * (x - mu) / sigma2 + sigma2.ln() + (2.0 * PI).ln())
}

/// Posterior responsibilities of one scalar under a K-component mixture,
/// computed in log space. If every joint term is `-inf` (or undefined) the
/// row falls back to one-hot at the argmax of the log terms (component 0
/// when all are equal).
pub fn posterior_row(h: f64, alpha: &[f64], mu: &[f64], sigma2: &[f64]) -> Vec<f64> {
    let logs: Vec<f64> = alpha
        .iter()
        .zip(mu)
        .zip(sigma2)
        .map(|((&a, &m), &s)| a.ln() + log_normal_density(h, m, s))
        .collect();
    let max = logs.iter().cloned().filter(|x| !x.is_nan()).fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        let best = logs.iter().position(|&x| x == max).unwrap_or(0);
        return (0..logs.len()).map(|k| if k == best { 1.0 } else { 0.0 }).collect();
    }
    let w: Vec<f64> = logs.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// Cluster Norm of one scalar given its assigned component.
pub fn cluster_norm_value(h: f64, mu: f64, sigma2: f64, eps: f64) -> f64 {
    (h - mu) / (sigma2.sqrt() + eps)
}
