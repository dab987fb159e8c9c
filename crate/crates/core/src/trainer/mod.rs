//! Mini-batch Adam training with early stopping on validation MAE, plus
//! evaluation, reference baselines and ablation orchestration.

mod ablation;
mod baseline;
mod eval;
mod optim;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{stack_batch, window, zscore, NormMode, NormStats, SplitSpec, TtsDataset, WindowedSample};
use crate::error::{GmrlError, Result};
use crate::model::{total_loss, GmrlModel};
use crate::tensor::{Graph, ParamStore};

pub use ablation::{run_ablation, AblationResult, Variant};
pub use baseline::{baseline_forecast, BaselineKind};
pub use eval::{cluster_recovery, collect_diagnostics, evaluate, predict_window, RecoveryReport};
pub use optim::Adam;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub max_epochs: usize,
    /// Epochs without a new best validation MAE before stopping.
    pub patience: usize,
    /// Weight of the cluster objective in the total loss.
    pub lambda: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Seeds parameter initialization and window shuffling.
    pub seed: u64,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            max_epochs: 100,
            patience: 15,
            lambda: 0.5,
            grad_clip: 5.0,
            seed: 0,
            eval_batch_size: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GmrlError::Config(m));
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("train.batch_size and train.eval_batch_size must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("train.learning_rate must be finite and non-negative, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("train.lambda must be non-negative, got {}", self.lambda));
        }
        if !(self.grad_clip >= 0.0) {
            return bad(format!("train.grad_clip must be non-negative, got {}", self.grad_clip));
        }
        Ok(())
    }
}

/// Normalized dataset with its chronological windows.
#[derive(Debug, Clone)]
pub struct PreparedData {
    /// Z-scored with training statistics.
    pub dataset: TtsDataset,
    pub norm: NormStats,
    pub split: SplitSpec,
    pub input_len: usize,
    pub horizon: usize,
    pub train: Vec<WindowedSample>,
    pub val: Vec<WindowedSample>,
    pub test: Vec<WindowedSample>,
}

impl PreparedData {
    pub fn new(ds: &TtsDataset, split: SplitSpec, input_len: usize, horizon: usize, mode: NormMode) -> Result<Self> {
        split.validate(ds.steps())?;
        let (dataset, norm) = zscore(ds, split.train_range(), mode)?;
        let windows = |range: crate::data::StepRange| -> Result<Vec<WindowedSample>> {
            if range.is_empty() {
                Ok(Vec::new())
            } else {
                window(&dataset, range, input_len, horizon)
            }
        };
        Ok(PreparedData {
            train: windows(split.train_range())?,
            val: windows(split.val_range())?,
            test: windows(split.test_range())?,
            dataset: dataset.clone(),
            norm,
            split,
            input_len,
            horizon,
        })
    }

    /// Hash of the split boundaries, window origins and every value bit.
    pub fn split_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        (self.split.train, self.split.val, self.split.test, self.input_len, self.horizon).hash(&mut h);
        for set in [&self.train, &self.val, &self.test] {
            set.len().hash(&mut h);
            for w in set {
                w.t0.hash(&mut h);
            }
        }
        for v in self.dataset.values().data() {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub reg_loss: f64,
    pub cluster_kl: f64,
    pub cluster_nll: f64,
    pub val_mae: f64,
    pub val_rmse: f64,
    /// Wall-clock time; kept out of serialized history so reruns are
    /// byte-identical.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Epoch (1-based) whose parameters were restored into the model.
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub stopped_early: bool,
}

pub fn write_history_jsonl(history: &[EpochRecord], mut out: impl Write) -> Result<()> {
    for r in history {
        let line = serde_json::to_string(r)?;
        writeln!(out, "{line}").map_err(|e| GmrlError::Data(format!("history write: {e}")))?;
    }
    Ok(())
}

fn param_norms(store: &ParamStore) -> String {
    store
        .iter()
        .map(|(_, p)| format!("{}={:.4e}", p.name, p.value.sq_norm().sqrt()))
        .collect::<Vec<_>>()
        .join(", ")
}

fn clip_gradients(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for p in store.iter_mut() {
            p.grad = p.grad.map(|g| g * scale);
        }
    }
    norm
}

/// Trains `model` in place and restores the parameters of the epoch with
/// the lowest validation MAE. `on_epoch` sees every history record as it is
/// produced.
pub fn train(
    model: &mut GmrlModel,
    data: &PreparedData,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(GmrlError::Data("no training windows".into()));
    }
    if data.val.is_empty() {
        return Err(GmrlError::Data("no validation windows; early stopping needs a validation split".into()));
    }
    if data.input_len != model.cfg.input_len || data.horizon != model.cfg.horizon {
        return Err(GmrlError::Config(format!(
            "windows are {}+{} steps but the model expects {}+{}",
            data.input_len, data.horizon, model.cfg.input_len, model.cfg.horizon
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed);
    let mut adam = Adam::new(cfg, &model.params);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let mut batches = 0usize;
        for (batch_id, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<&WindowedSample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let (x, y) = stack_batch(&samples)?;
            let mut g = Graph::new();
            let step = (|| -> Result<[f64; 4]> {
                let out = model.forward(&mut g, &x)?;
                let loss = total_loss(&mut g, out.y_hat, &y, out.cluster, cfg.lambda)?;
                let vals = [
                    g.value(loss.total).item(),
                    g.value(loss.reg).item(),
                    g.value(out.cluster_kl).item(),
                    g.value(out.cluster_nll).item(),
                ];
                if !vals[0].is_finite() {
                    return Err(GmrlError::NonFinite { op: "loss" });
                }
                g.backward(loss.total, &mut model.params)?;
                Ok(vals)
            })();
            let vals = match step {
                Ok(v) => v,
                Err(e @ (GmrlError::NonFinite { .. } | GmrlError::Numeric(_))) => {
                    return Err(GmrlError::Numeric(format!(
                        "training diverged at epoch {epoch}, batch {batch_id}: {e}; parameter norms: {}",
                        param_norms(&model.params)
                    )));
                }
                Err(e) => return Err(e),
            };
            clip_gradients(&mut model.params, cfg.grad_clip);
            adam.step(&mut model.params);
            for (s, v) in sums.iter_mut().zip(vals) {
                *s += v;
            }
            batches += 1;
        }
        let n = batches as f64;
        let report = evaluate(model, data, &data.val, cfg.eval_batch_size, "val")?;
        let record = EpochRecord {
            epoch,
            train_loss: sums[0] / n,
            reg_loss: sums[1] / n,
            cluster_kl: sums[2] / n,
            cluster_nll: sums[3] / n,
            val_mae: report.overall.mae,
            val_rmse: report.overall.rmse,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.5} (reg {:.5}, kl {:.5}, nll {:.5}) val MAE {:.5} RMSE {:.5}",
            record.train_loss,
            record.reg_loss,
            record.cluster_kl,
            record.cluster_nll,
            record.val_mae,
            record.val_rmse
        );
        on_epoch(&record);
        let improved = best.as_ref().is_none_or(|(b, _, _)| record.val_mae < *b);
        if improved {
            best = Some((record.val_mae, epoch, model.params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        history.push(record);
        if since_best >= cfg.patience {
            stopped_early = true;
            break;
        }
    }

    let (best_val_mae, best_epoch) = match best {
        Some((mae, epoch, params)) => {
            model.params = params;
            (mae, epoch)
        }
        None => (f64::NAN, 0),
    };
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_mae,
        stopped_early,
    })
}
