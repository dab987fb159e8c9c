use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, train, EpochRecord, PreparedData, TrainConfig};
use crate::error::{GmrlError, Result};
use crate::gmre::AssignMode;
use crate::model::{DataDims, ForecastReport, GmrlModel, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// The temporal encoders consume their input duplicated on channels.
    NoGmre,
    /// Nearest of K random centers replaces the mixture posterior.
    HardClustering,
    NoHra,
    /// Cluster objective weight set to zero.
    NoClusterLoss,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoGmre,
        Variant::HardClustering,
        Variant::NoHra,
        Variant::NoClusterLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoGmre => "no_gmre",
            Variant::HardClustering => "hard_clustering",
            Variant::NoHra => "no_hra",
            Variant::NoClusterLoss => "no_cluster_loss",
        }
    }

    /// Applies the ablation on top of a base configuration.
    pub fn apply(self, model: &ModelConfig, train: &TrainConfig) -> (ModelConfig, TrainConfig) {
        let (mut m, mut t) = (model.clone(), train.clone());
        match self {
            Variant::Full => {}
            Variant::NoGmre => m.gmre = false,
            Variant::HardClustering => m.assignment = AssignMode::NearestCenter,
            Variant::NoHra => m.hra = false,
            Variant::NoClusterLoss => t.lambda = 0.0,
        }
        (m, t)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = GmrlError;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .trim()
            .to_ascii_lowercase()
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
            .collect();
        match key.as_str() {
            "full" | "gmrl" => Ok(Variant::Full),
            "no_gmre" | "w_o_gmre" | "wo_gmre" => Ok(Variant::NoGmre),
            "hard_clustering" | "w__hard_clustering" | "w_hard_clustering" | "kmeans" | "w__kmeans" => {
                Ok(Variant::HardClustering)
            }
            "no_hra" | "w_o_hra" | "wo_hra" => Ok(Variant::NoHra),
            "no_cluster_loss" | "w_o_cluster_loss" | "wo_cluster_loss" | "lambda_0" => Ok(Variant::NoClusterLoss),
            _ => Err(GmrlError::Config(format!(
                "unknown ablation variant `{s}`; expected one of {}",
                Variant::ALL.map(Variant::name).join(", ")
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub variant: Variant,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub val_mae: f64,
    pub test: ForecastReport,
    pub split_hash: u64,
    pub model: GmrlModel,
}

fn run_one(
    variant: Variant,
    data: &PreparedData,
    dims: DataDims,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<AblationResult> {
    let (m, t) = variant.apply(model_cfg, train_cfg);
    let split_hash = data.split_hash();
    let mut model = GmrlModel::new(m, dims, t.seed)?;
    let out = train(&mut model, data, &t, |r| {
        log::debug!("{variant} epoch {}: val MAE {:.5}", r.epoch, r.val_mae)
    })?;
    let test = evaluate(&model, data, &data.test, t.eval_batch_size, variant.name())?;
    Ok(AblationResult {
        variant,
        history: out.history,
        best_epoch: out.best_epoch,
        val_mae: out.best_val_mae,
        test,
        split_hash,
        model,
    })
}

/// Trains every variant of `suite` with the same data, seed and settings
/// apart from the ablated component. With `threads > 1` variants run
/// concurrently; results keep suite order and each run is deterministic.
pub fn run_ablation(
    suite: &[Variant],
    data: &PreparedData,
    dims: DataDims,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    threads: usize,
) -> Result<Vec<AblationResult>> {
    if suite.is_empty() {
        return Err(GmrlError::Config("ablation suite is empty".into()));
    }
    for (i, v) in suite.iter().enumerate() {
        if suite[..i].contains(v) {
            return Err(GmrlError::Config(format!("variant `{v}` listed twice")));
        }
    }
    let results: Vec<Result<AblationResult>> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| GmrlError::Config(format!("thread pool: {e}")))?;
        pool.install(|| {
            suite
                .par_iter()
                .map(|&v| run_one(v, data, dims, model_cfg, train_cfg))
                .collect()
        })
    } else {
        suite.iter().map(|&v| run_one(v, data, dims, model_cfg, train_cfg)).collect()
    };
    let results: Vec<AblationResult> = results.into_iter().collect::<Result<_>>()?;
    let first = results[0].split_hash;
    if let Some(r) = results.iter().find(|r| r.split_hash != first) {
        return Err(GmrlError::Data(format!(
            "variant `{}` saw different data splits than `{}`",
            r.variant, results[0].variant
        )));
    }
    Ok(results)
}
