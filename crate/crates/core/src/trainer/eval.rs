use serde::{Deserialize, Serialize};

use super::PreparedData;
use crate::data::{stack_batch, NormStats, WindowedSample};
use crate::error::{GmrlError, Result};
use crate::model::{permutation_accuracy, Diagnostics, ForecastReport, GmrlModel, ScoreAccumulator};
use crate::tensor::{Graph, Shape, Tensor};

fn batches(samples: &[WindowedSample], size: usize) -> impl Iterator<Item = Vec<&WindowedSample>> {
    samples.chunks(size.max(1)).map(|c| c.iter().collect())
}

fn sample_of(batch: &Tensor, i: usize) -> Result<Tensor> {
    let d = batch.dims();
    let per: usize = d[1..].iter().product();
    Tensor::new(Shape::new(d[1..].to_vec())?, batch.data()[i * per..(i + 1) * per].to_vec())
}

/// Scores the model on `samples` in original units.
pub fn evaluate(
    model: &GmrlModel,
    data: &PreparedData,
    samples: &[WindowedSample],
    batch_size: usize,
    label: &str,
) -> Result<ForecastReport> {
    if samples.is_empty() {
        return Err(GmrlError::Data(format!("cannot evaluate on an empty {label} split")));
    }
    let mut acc = ScoreAccumulator::new(
        data.dataset.source_ids().to_vec(),
        model.cfg.horizon,
        model.dims.locations,
    );
    for batch in batches(samples, batch_size) {
        let (x, y) = stack_batch(&batch)?;
        let pred = model.predict(&x)?;
        for i in 0..batch.len() {
            let p = data.norm.denormalize(&sample_of(&pred, i)?);
            let t = data.norm.denormalize(&sample_of(&y, i)?);
            acc.add(&p, &t)?;
        }
    }
    acc.finish(label)
}

/// Forecast `(O, L, S)` in original units from a raw `(T, L, S)` window.
pub fn predict_window(model: &GmrlModel, norm: &NormStats, x: &Tensor) -> Result<Tensor> {
    let mut dims = vec![1];
    dims.extend_from_slice(x.dims());
    let xb = Tensor::from_vec(&dims, norm.normalize(x).into_data())?;
    let pred = model.predict(&xb)?;
    Ok(norm.denormalize(&sample_of(&pred, 0)?))
}

/// Agreement between the last layer's per-scalar assignments and a known
/// component label per (location, source).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    /// Permutation-matched accuracy of every channel.
    pub per_channel: Vec<f64>,
    pub best_channel: usize,
    pub best: f64,
    pub mean: f64,
}

pub fn cluster_recovery(
    model: &GmrlModel,
    samples: &[WindowedSample],
    labels: &[usize],
    batch_size: usize,
) -> Result<RecoveryReport> {
    let (l, s) = (model.dims.locations, model.dims.sources);
    if labels.len() != l * s {
        return Err(GmrlError::Data(format!(
            "{} labels for {} (location, source) pairs",
            labels.len(),
            l * s
        )));
    }
    if samples.is_empty() {
        return Err(GmrlError::Data("cluster recovery needs at least one window".into()));
    }
    let c = model.cfg.hidden_dim;
    let mut pred: Vec<Vec<usize>> = vec![Vec::new(); c];
    let mut truth = Vec::new();
    for batch in batches(samples, batch_size) {
        let (x, _) = stack_batch(&batch)?;
        let mut g = Graph::new();
        let out = model.forward(&mut g, &x)?;
        let last = out
            .gmre
            .last()
            .ok_or_else(|| GmrlError::Config("cluster recovery needs a model with GMRE layers".into()))?;
        for (i, &k) in last.assign.iter().enumerate() {
            pred[i % c].push(k);
            if i % c == 0 {
                truth.push(labels[(i / c) % (l * s)]);
            }
        }
    }
    let per_channel: Vec<f64> = pred.iter().map(|p| permutation_accuracy(p, &truth)).collect();
    let (best_channel, best) = per_channel
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::MIN), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
    let mean = per_channel.iter().sum::<f64>() / c as f64;
    Ok(RecoveryReport {
        per_channel,
        best_channel,
        best,
        mean,
    })
}

pub fn collect_diagnostics(model: &GmrlModel, samples: &[WindowedSample], batch_size: usize) -> Result<Diagnostics> {
    let mut diag = Diagnostics::new();
    for batch in batches(samples, batch_size) {
        let (x, _) = stack_batch(&batch)?;
        let t0s: Vec<usize> = batch.iter().map(|w| w.t0).collect();
        let mut g = Graph::new();
        let out = model.forward(&mut g, &x)?;
        diag.observe(&g, &out, &t0s);
    }
    Ok(diag)
}
