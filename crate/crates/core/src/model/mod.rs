//! Full forecaster: embedding, stacked GMRE→TE layers, skip fusion, memory
//! augmentation and a two-layer ReLU head.

mod checkpoint;
mod diagnostics;
mod report;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GmrlError, Result};
use crate::gmre::{AssignMode, GmreConfig, GmreLayer, GmreOutput, KlMode};
use crate::hra::{HraConfig, HraOutput, MemoryBank};
use crate::temporal::{dilation_for_depth, receptive_field, TeConfig, TeLayer, TeOutput};
use crate::tensor::{Graph, Init, ParamId, ParamStore, Shape, Tensor, Var};

pub use checkpoint::{diff_keys, load_checkpoint, manifest_path, save_checkpoint, Manifest, ParamEntry};
pub use diagnostics::{ClusterTraceRow, Diagnostics, GmreLayerSummary};
pub use report::{permutation_accuracy, ForecastReport, ReportCell, ReportRow, ScoreAccumulator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipFusion {
    /// Per-layer `d_k -> d_k` projection of the last time step, summed.
    #[default]
    Sum,
    /// Concatenate the last steps of all layers and project once.
    ConcatProject,
}

/// Architecture hyperparameters and the ablation switches that change the
/// computation graph. Defaults are the published configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Input window T.
    pub input_len: usize,
    /// Forecast horizon O.
    pub horizon: usize,
    /// Number of GMRE→TE layers L_g.
    pub layers: usize,
    /// Mixture components K.
    pub components: usize,
    /// Embedding width d_z.
    pub embed_dim: usize,
    /// Hidden channels d_k; the value projection gets d_k - d_z channels.
    pub hidden_dim: usize,
    /// Memory records m.
    pub memory_slots: usize,
    /// Memory record width d_m.
    pub memory_dim: usize,
    pub kernel_size: usize,
    /// Stabilizer added to the component deviation in Cluster Norm.
    pub cluster_eps: f64,
    pub kl_mode: KlMode,
    pub assignment: AssignMode,
    /// When false the TE of every layer consumes its input duplicated on
    /// the channel axis.
    pub gmre: bool,
    pub hra: bool,
    pub per_position_query: bool,
    pub skip_fusion: SkipFusion,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_len: 16,
            horizon: 3,
            layers: 4,
            components: 17,
            embed_dim: 24,
            hidden_dim: 48,
            memory_slots: 8,
            memory_dim: 48,
            kernel_size: 2,
            cluster_eps: 1e-5,
            kl_mode: KlMode::BatchAverage,
            assignment: AssignMode::Posterior,
            gmre: true,
            hra: true,
            per_position_query: false,
            skip_fusion: SkipFusion::Sum,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GmrlError::Config(m));
        for (name, v) in [
            ("input_len", self.input_len),
            ("horizon", self.horizon),
            ("layers", self.layers),
            ("components", self.components),
            ("embed_dim", self.embed_dim),
            ("memory_slots", self.memory_slots),
            ("memory_dim", self.memory_dim),
            ("kernel_size", self.kernel_size),
        ] {
            if v == 0 {
                return bad(format!("model.{name} must be at least 1"));
            }
        }
        if self.hidden_dim <= self.embed_dim {
            return bad(format!(
                "model.hidden_dim ({}) must exceed model.embed_dim ({}) to leave room for the value channels",
                self.hidden_dim, self.embed_dim
            ));
        }
        if !(self.cluster_eps > 0.0) {
            return bad(format!("model.cluster_eps must be positive, got {}", self.cluster_eps));
        }
        Ok(())
    }

    pub fn dilations(&self) -> Vec<usize> {
        (0..self.layers).map(dilation_for_depth).collect()
    }

    pub fn receptive_field(&self) -> usize {
        receptive_field(self.kernel_size, &self.dilations())
    }
}

/// Extents of the data the model is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataDims {
    pub locations: usize,
    pub sources: usize,
}

#[derive(Debug, Clone)]
struct Ttse {
    e_t: ParamId,
    e_l: ParamId,
    e_s: ParamId,
    w_f: ParamId,
    b_f: ParamId,
}

#[derive(Debug, Clone)]
struct Block {
    gmre: Option<GmreLayer>,
    te: TeLayer,
}

#[derive(Debug, Clone)]
struct Head {
    w_o1: ParamId,
    b_o1: ParamId,
    w_o2: ParamId,
    b_o2: ParamId,
}

#[derive(Debug, Clone)]
pub struct GmrlModel {
    pub cfg: ModelConfig,
    pub dims: DataDims,
    pub params: ParamStore,
    ttse: Ttse,
    blocks: Vec<Block>,
    skip: Vec<(ParamId, ParamId)>,
    memory: Option<MemoryBank>,
    head: Head,
}

/// One named tensor of the per-sample shape trace (batch axis dropped).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRow {
    pub name: String,
    pub dims: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `(B, O, L, S)`
    pub y_hat: Var,
    /// Mean of the per-layer cluster objectives (constant zero without GMRE).
    pub cluster: Var,
    pub cluster_kl: Var,
    pub cluster_nll: Var,
    /// `(B, T, L, S, d_z)`
    pub embedding: Var,
    /// `(B, T, L, S, d_k)`
    pub h0: Var,
    pub gmre: Vec<GmreOutput>,
    pub te: Vec<TeOutput>,
    /// `(B, L, S, d_k)`
    pub h_sc: Var,
    pub hra: Option<HraOutput>,
    pub h_aug: Var,
    /// Inputs of the head's two ReLUs.
    pub head_pre: [Var; 2],
    pub trace: Vec<TraceRow>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub reg: Var,
}

fn dims_of(g: &Graph, v: Var) -> Vec<usize> {
    g.shape(v).dims().to_vec()
}

impl GmrlModel {
    pub fn new(cfg: ModelConfig, dims: DataDims, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if dims.locations == 0 || dims.sources == 0 {
            return Err(GmrlError::Config("the model needs at least one location and one source".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (t, l, s) = (cfg.input_len, dims.locations, dims.sources);
        let (dz, dk) = (cfg.embed_dim, cfg.hidden_dim);
        let shape = |d: Vec<usize>| Shape::new(d);
        // embedding rows are lookups of a one-hot code, so fan-in is 1
        let embed = Init::UniformScaled { fan_in: 1 };

        let ttse = Ttse {
            e_t: store.register("ttse.e_t", shape(vec![t, dz])?, embed, &mut rng)?,
            e_l: store.register("ttse.e_l", shape(vec![l, dz])?, embed, &mut rng)?,
            e_s: store.register("ttse.e_s", shape(vec![s, dz])?, embed, &mut rng)?,
            w_f: store.register("ttse.w_f", shape(vec![1, dk - dz])?, Init::UniformScaled { fan_in: 1 }, &mut rng)?,
            b_f: store.register("ttse.b_f", shape(vec![dk - dz])?, Init::Zeros, &mut rng)?,
        };

        let mut blocks = Vec::with_capacity(cfg.layers);
        for (depth, dilation) in cfg.dilations().into_iter().enumerate() {
            let gmre = if cfg.gmre {
                let gc = GmreConfig {
                    components: cfg.components,
                    channels: dk,
                    positions: t * l * s,
                    eps: cfg.cluster_eps,
                    kl_mode: cfg.kl_mode,
                    assign_mode: cfg.assignment,
                };
                Some(GmreLayer::new(gc, &format!("layer{depth}.gmre"), &mut store, &mut rng)?)
            } else {
                None
            };
            let tc = TeConfig {
                channels: dk,
                kernel_size: cfg.kernel_size,
                dilation,
            };
            let te = TeLayer::new(tc, &format!("layer{depth}.te"), &mut store, &mut rng)?;
            blocks.push(Block { gmre, te });
        }

        let mut skip = Vec::new();
        match cfg.skip_fusion {
            SkipFusion::Sum => {
                for depth in 0..cfg.layers {
                    let w = store.register(
                        format!("layer{depth}.skip.w"),
                        shape(vec![dk, dk])?,
                        Init::UniformScaled { fan_in: dk },
                        &mut rng,
                    )?;
                    let b = store.register(format!("layer{depth}.skip.b"), shape(vec![dk])?, Init::Zeros, &mut rng)?;
                    skip.push((w, b));
                }
            }
            SkipFusion::ConcatProject => {
                let fan_in = cfg.layers * dk;
                let w = store.register("skip.w", shape(vec![fan_in, dk])?, Init::UniformScaled { fan_in }, &mut rng)?;
                let b = store.register("skip.b", shape(vec![dk])?, Init::Zeros, &mut rng)?;
                skip.push((w, b));
            }
        }

        let memory = if cfg.hra {
            let hc = HraConfig {
                locations: l,
                sources: s,
                channels: dk,
                slots: cfg.memory_slots,
                dim: cfg.memory_dim,
                per_position_query: cfg.per_position_query,
            };
            Some(MemoryBank::new(hc, "hra", &mut store, &mut rng)?)
        } else {
            None
        };

        let aug = if cfg.hra { dk + cfg.memory_dim } else { dk };
        let head = Head {
            w_o1: store.register("head.w_o1", shape(vec![aug, dk])?, Init::UniformScaled { fan_in: aug }, &mut rng)?,
            b_o1: store.register("head.b_o1", shape(vec![dk])?, Init::Zeros, &mut rng)?,
            w_o2: store.register(
                "head.w_o2",
                shape(vec![dk, cfg.horizon])?,
                Init::UniformScaled { fan_in: dk },
                &mut rng,
            )?,
            b_o2: store.register("head.b_o2", shape(vec![cfg.horizon])?, Init::Zeros, &mut rng)?,
        };

        Ok(GmrlModel {
            cfg,
            dims,
            params: store,
            ttse,
            blocks,
            skip,
            memory,
            head,
        })
    }

    /// Parameter ids grouped by component, in registration order.
    pub fn param_groups(&self) -> Vec<(String, Vec<ParamId>)> {
        let mut groups = vec![(
            "ttse".to_string(),
            vec![self.ttse.e_t, self.ttse.e_l, self.ttse.e_s, self.ttse.w_f, self.ttse.b_f],
        )];
        for (depth, b) in self.blocks.iter().enumerate() {
            if let Some(gm) = &b.gmre {
                groups.push((format!("layer{depth}.gmre"), gm.param_ids()));
            }
            groups.push((format!("layer{depth}.te"), b.te.param_ids()));
        }
        groups.push(("skip".into(), self.skip.iter().flat_map(|&(w, b)| [w, b]).collect()));
        if let Some(m) = &self.memory {
            groups.push(("hra".into(), m.param_ids()));
        }
        let h = &self.head;
        groups.push(("head".into(), vec![h.w_o1, h.b_o1, h.w_o2, h.b_o2]));
        groups
    }

    fn check_x(&self, x: &Tensor) -> Result<usize> {
        let d = x.dims();
        let expect = [self.cfg.input_len, self.dims.locations, self.dims.sources];
        if d.len() != 4 || d[1..] != expect {
            return Err(GmrlError::ShapeMismatch {
                op: "model_forward",
                lhs: x.shape().clone(),
                rhs: Shape::new(expect.to_vec())?,
            });
        }
        Ok(d[0])
    }

    /// `H = [f(X), E]` for `x: (B, T, L, S)`; returns `(E, H)`.
    pub fn build_input(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        self.build_input_with(g, &self.params, x)
    }

    fn build_input_with(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<(Var, Var)> {
        let d = dims_of(g, x);
        let (b, t, l, s) = (d[0], d[1], d[2], d[3]);
        let dz = self.cfg.embed_dim;
        let e_t = g.param(p, self.ttse.e_t)?;
        let e_t = g.reshape(e_t, &[1, t, 1, 1, dz])?;
        let e_l = g.param(p, self.ttse.e_l)?;
        let e_l = g.reshape(e_l, &[1, 1, l, 1, dz])?;
        let e_s = g.param(p, self.ttse.e_s)?;
        let e_s = g.reshape(e_s, &[1, 1, 1, s, dz])?;
        let e = g.add(e_t, e_l)?;
        let e = g.add(e, e_s)?;
        let e = g.broadcast_to(e, &[b, t, l, s, dz])?;

        let x5 = g.reshape(x, &[b, t, l, s, 1])?;
        let w_f = g.param(p, self.ttse.w_f)?;
        let b_f = g.param(p, self.ttse.b_f)?;
        let fx = g.matmul(x5, w_f)?;
        let fx = g.add_bias(fx, b_f)?;
        let h = g.concat(&[fx, e], 4)?;
        Ok((e, h))
    }

    /// Runs the network on `x: (B, T, L, S)` (normalized values).
    pub fn forward(&self, g: &mut Graph, x: &Tensor) -> Result<ForwardOutput> {
        self.forward_with(g, &self.params, x)
    }

    /// Same as [`GmrlModel::forward`] but reads parameter values from
    /// `p`, which must come from this model (used for finite differences).
    pub fn forward_with(&self, g: &mut Graph, p: &ParamStore, x: &Tensor) -> Result<ForwardOutput> {
        let b = self.check_x(x)?;
        let cfg = &self.cfg;
        let (t, l, s, dk) = (cfg.input_len, self.dims.locations, self.dims.sources, cfg.hidden_dim);
        let mut trace = Vec::new();
        let mut record = |g: &Graph, name: &str, v: Var| {
            trace.push(TraceRow {
                name: name.to_string(),
                dims: dims_of(g, v)[1..].to_vec(),
            })
        };

        let xv = g.constant(x.clone())?;
        record(g, "X", xv);
        let (e, h0) = self.build_input_with(g, p, xv)?;
        record(g, "E", e);
        record(g, "H", h0);

        let mut h = h0;
        let mut gmre_out = Vec::new();
        let mut te_out = Vec::new();
        let mut last_steps = Vec::new();
        for block in &self.blocks {
            let h_gm = match &block.gmre {
                Some(layer) => {
                    let out = layer.forward(g, p, h)?;
                    let h_gm = out.h_gm;
                    if gmre_out.is_empty() {
                        record(g, "H_hat", out.h_hat);
                        record(g, "H_gm", h_gm);
                    }
                    gmre_out.push(out);
                    h_gm
                }
                None => g.concat(&[h, h], 4)?,
            };
            let te = block.te.forward(g, p, h_gm)?;
            if te_out.is_empty() {
                record(g, "H_te", te.h_te);
            }
            let last = g.slice(te.h_te, 1, t - 1, 1)?;
            last_steps.push(g.reshape(last, &[b, l, s, dk])?);
            h = te.h_te;
            te_out.push(te);
        }

        let h_sc = match cfg.skip_fusion {
            SkipFusion::Sum => {
                let mut acc: Option<Var> = None;
                for (&last, &(w, bias)) in last_steps.iter().zip(&self.skip) {
                    let w = g.param(p, w)?;
                    let bias = g.param(p, bias)?;
                    let y = g.matmul(last, w)?;
                    let y = g.add_bias(y, bias)?;
                    acc = Some(match acc {
                        Some(a) => g.add(a, y)?,
                        None => y,
                    });
                }
                acc.expect("at least one layer")
            }
            SkipFusion::ConcatProject => {
                let cat = g.concat(&last_steps, 3)?;
                let (w, bias) = self.skip[0];
                let w = g.param(p, w)?;
                let bias = g.param(p, bias)?;
                let y = g.matmul(cat, w)?;
                g.add_bias(y, bias)?
            }
        };
        record(g, "H_sc", h_sc);

        let (hra, h_aug) = match &self.memory {
            Some(m) => {
                let out = m.forward(g, p, h_sc)?;
                (Some(out), out.h_aug)
            }
            None => (None, h_sc),
        };
        record(g, "H_aug", h_aug);

        let hd = &self.head;
        let a = g.relu(h_aug)?;
        let w1 = g.param(p, hd.w_o1)?;
        let b1 = g.param(p, hd.b_o1)?;
        let z = g.matmul(a, w1)?;
        let z = g.add_bias(z, b1)?;
        let head_pre = [h_aug, z];
        let z = g.relu(z)?;
        let w2 = g.param(p, hd.w_o2)?;
        let b2 = g.param(p, hd.b_o2)?;
        let y = g.matmul(z, w2)?;
        let y = g.add_bias(y, b2)?;
        let y_hat = g.permute(y, &[0, 3, 1, 2])?;
        record(g, "Y_hat", y_hat);

        let (cluster, cluster_kl, cluster_nll) = if gmre_out.is_empty() {
            let zero = g.constant(Tensor::scalar(0.0))?;
            (zero, zero, zero)
        } else {
            let n = gmre_out.len() as f64;
            let mean_of = |g: &mut Graph, pick: fn(&GmreOutput) -> Var| -> Result<Var> {
                let mut acc = pick(&gmre_out[0]);
                for o in &gmre_out[1..] {
                    acc = g.add(acc, pick(o))?;
                }
                g.scale(acc, 1.0 / n)
            };
            (
                mean_of(g, |o| o.total)?,
                mean_of(g, |o| o.kl)?,
                mean_of(g, |o| o.nll)?,
            )
        };

        Ok(ForwardOutput {
            y_hat,
            cluster,
            cluster_kl,
            cluster_nll,
            embedding: e,
            h0,
            gmre: gmre_out,
            te: te_out,
            h_sc,
            hra,
            h_aug,
            head_pre,
            trace,
        })
    }

    /// Forecasts for a batch, `(B, O, L, S)` in normalized units.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, x)?;
        Ok(g.value(out.y_hat).clone())
    }

    /// Per-sample shapes of every named representation for a batch of one.
    pub fn shape_trace(&self) -> Result<Vec<TraceRow>> {
        let x = Tensor::zeros(Shape::new(vec![
            1,
            self.cfg.input_len,
            self.dims.locations,
            self.dims.sources,
        ])?);
        let mut g = Graph::new();
        Ok(self.forward(&mut g, &x)?.trace)
    }
}

impl ForwardOutput {
    /// Smallest magnitude among the inputs of the head's ReLUs.
    pub fn relu_margin(&self, g: &Graph) -> f64 {
        self.head_pre
            .iter()
            .flat_map(|&v| g.value(v).data().iter().map(|x| x.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    /// Hash of every discrete choice the pass made: component assignments
    /// and ReLU activity. Two passes with equal keys lie on the same smooth
    /// piece of the loss.
    pub fn region_key(&self, g: &Graph) -> u64 {
        let mut h = DefaultHasher::new();
        for o in &self.gmre {
            o.assign.hash(&mut h);
        }
        for &v in &self.head_pre {
            for x in g.value(v).data() {
                (*x > 0.0).hash(&mut h);
            }
        }
        h.finish()
    }
}

/// `sum((Y - Ŷ)²) / B + λ · cluster`.
pub fn total_loss(g: &mut Graph, y_hat: Var, y: &Tensor, cluster: Var, lambda: f64) -> Result<LossVars> {
    if !(lambda >= 0.0) {
        return Err(GmrlError::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    if g.shape(y_hat) != y.shape() {
        return Err(GmrlError::ShapeMismatch {
            op: "total_loss",
            lhs: g.shape(y_hat).clone(),
            rhs: y.shape().clone(),
        });
    }
    let batch = y.dims().first().copied().unwrap_or(1);
    let yv = g.constant(y.clone())?;
    let diff = g.sub(yv, y_hat)?;
    let sq = g.mul(diff, diff)?;
    let sum = g.sum_all(sq)?;
    let reg = g.scale(sum, 1.0 / batch as f64)?;
    let total = if lambda == 0.0 {
        reg
    } else {
        let c = g.scale(cluster, lambda)?;
        g.add(reg, c)?
    };
    Ok(LossVars { total, reg })
}
