use serde::{Deserialize, Serialize};

use super::{StepRange, TtsDataset};
use crate::error::{GmrlError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// One (mean, std) over the whole training tensor.
    #[default]
    Global,
    /// One (mean, std) per source.
    PerSource,
}

/// Z-score statistics computed from the training range only. `mean` and
/// `std` hold one entry for [`NormMode::Global`] and one per source
/// otherwise. Population formula.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mode: NormMode,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Set when a zero standard deviation was replaced by 1.
    #[serde(default)]
    pub constant_guard: bool,
}

impl NormStats {
    pub fn identity() -> Self {
        NormStats {
            mode: NormMode::Global,
            mean: vec![0.0],
            std: vec![1.0],
            constant_guard: false,
        }
    }

    fn at(&self, source: usize) -> (f64, f64) {
        match self.mode {
            NormMode::Global => (self.mean[0], self.std[0]),
            NormMode::PerSource => (self.mean[source], self.std[source]),
        }
    }

    pub fn normalize_value(&self, x: f64, source: usize) -> f64 {
        let (m, s) = self.at(source);
        (x - m) / s
    }

    pub fn denormalize_value(&self, z: f64, source: usize) -> f64 {
        let (m, s) = self.at(source);
        z * s + m
    }

    /// Applies to any tensor whose last axis indexes sources.
    pub fn normalize(&self, values: &Tensor) -> Tensor {
        self.apply(values, |x, s| self.normalize_value(x, s))
    }

    pub fn denormalize(&self, values: &Tensor) -> Tensor {
        self.apply(values, |x, s| self.denormalize_value(x, s))
    }

    fn apply(&self, values: &Tensor, f: impl Fn(f64, usize) -> f64) -> Tensor {
        let sources = values.dims().last().copied().unwrap_or(1);
        let data = values
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, i % sources))
            .collect();
        Tensor::new(values.shape().clone(), data).expect("same shape")
    }
}

fn population_stats(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Normalizes the whole dataset with statistics from `train` only.
pub fn zscore(ds: &TtsDataset, train: StepRange, mode: NormMode) -> Result<(TtsDataset, NormStats)> {
    if train.is_empty() || train.end > ds.steps() {
        return Err(GmrlError::Data(format!(
            "z-score needs a non-empty training range inside {} steps, got [{}, {})",
            ds.steps(),
            train.start,
            train.end
        )));
    }
    let (nl, ns) = (ds.locations(), ds.sources());
    let data = ds.values().data();
    let train_slice = &data[train.start * nl * ns..train.end * nl * ns];
    let groups: Vec<Vec<f64>> = match mode {
        NormMode::Global => vec![train_slice.to_vec()],
        NormMode::PerSource => (0..ns)
            .map(|s| train_slice.iter().skip(s).step_by(ns).copied().collect())
            .collect(),
    };
    let mut stats = NormStats {
        mode,
        mean: Vec::with_capacity(groups.len()),
        std: Vec::with_capacity(groups.len()),
        constant_guard: false,
    };
    for (g, values) in groups.iter().enumerate() {
        let (mean, mut std) = population_stats(values.iter().copied());
        if std == 0.0 {
            log::warn!("z-score: training values of group {g} are constant; using std = 1");
            std = 1.0;
            stats.constant_guard = true;
        }
        stats.mean.push(mean);
        stats.std.push(std);
    }
    let normalized = ds.with_values(stats.normalize(ds.values()))?;
    Ok((normalized, stats))
}
