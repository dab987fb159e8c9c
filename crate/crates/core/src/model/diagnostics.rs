use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::ForwardOutput;
use crate::error::{GmrlError, Result};
use crate::gmre::GmreLayer;
use crate::tensor::Graph;

/// Batch-averaged mixture parameters of one layer plus, per channel, how
/// many scalars were assigned to each component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmreLayerSummary {
    pub layer: usize,
    pub samples: usize,
    /// `[K][d_k]`
    pub alpha: Vec<Vec<f64>>,
    pub mu: Vec<Vec<f64>>,
    pub sigma2: Vec<Vec<f64>>,
    /// `[d_k][K]`
    pub assignment_histogram: Vec<Vec<u64>>,
}

/// Mean value of the scalars assigned to one component at one dataset step,
/// before and after Cluster Norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTraceRow {
    pub layer: usize,
    pub channel: usize,
    pub component: usize,
    pub step: usize,
    pub count: u64,
    pub mean_before: f64,
    pub mean_after: f64,
}

#[derive(Debug, Clone, Serialize)]
struct AttentionRecord {
    t0: usize,
    phi: Vec<f64>,
}

/// Accumulates evaluation-time diagnostics over batches.
#[derive(Debug, Clone, Default)]
pub struct Diagnostics {
    layers: Vec<GmreLayerSummary>,
    attention: Vec<AttentionRecord>,
    traces: BTreeMap<(usize, usize, usize), (u64, f64, f64)>,
    trace_layer: Option<usize>,
}

impl Diagnostics {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records one forward pass; `t0s` holds the dataset index of the first
    /// input step of every sample in the batch.
    pub fn observe(&mut self, g: &Graph, out: &ForwardOutput, t0s: &[usize]) {
        let last_layer = out.gmre.len().checked_sub(1);
        self.trace_layer = last_layer;
        for (layer, gm) in out.gmre.iter().enumerate() {
            let h_in = if layer == 0 { out.h0 } else { out.te[layer - 1].h_te };
            let hd = g.value(h_in).dims().to_vec();
            let (b, c) = (hd[0], hd[4]);
            let t = hd[1];
            let p = hd[1] * hd[2] * hd[3];
            let mix = GmreLayer::mixture_values(g, gm);
            let k = mix.as_ref().map(|m| m.alpha.dims()[1]).unwrap_or_else(|| {
                gm.assign.iter().copied().max().unwrap_or(0) + 1
            });
            if self.layers.len() <= layer {
                self.layers.push(GmreLayerSummary {
                    layer,
                    samples: 0,
                    alpha: vec![vec![0.0; c]; k],
                    mu: vec![vec![0.0; c]; k],
                    sigma2: vec![vec![0.0; c]; k],
                    assignment_histogram: vec![vec![0; k]; c],
                });
            }
            let summary = &mut self.layers[layer];
            if let Some(m) = &mix {
                let n0 = summary.samples as f64;
                let n1 = (summary.samples + b) as f64;
                for kk in 0..k {
                    for ch in 0..c {
                        let batch_sum = |t: &crate::tensor::Tensor| (0..b).map(|bi| t.at(&[bi, kk, ch])).sum::<f64>();
                        let upd = |old: f64, s: f64| (old * n0 + s) / n1;
                        summary.alpha[kk][ch] = upd(summary.alpha[kk][ch], batch_sum(&m.alpha));
                        summary.mu[kk][ch] = upd(summary.mu[kk][ch], batch_sum(&m.mu));
                        summary.sigma2[kk][ch] = upd(summary.sigma2[kk][ch], batch_sum(&m.sigma2));
                    }
                }
            }
            summary.samples += b;
            for (i, &kk) in gm.assign.iter().enumerate() {
                if kk < summary.assignment_histogram[i % c].len() {
                    summary.assignment_histogram[i % c][kk] += 1;
                }
            }

            if Some(layer) == last_layer {
                let before = g.value(h_in).data();
                let after = g.value(gm.h_hat).data();
                let plane = p / t;
                for (i, &kk) in gm.assign.iter().enumerate() {
                    let ch = i % c;
                    let pos = (i / c) % p;
                    let bi = i / (c * p);
                    let step = t0s.get(bi).copied().unwrap_or(0) + pos / plane;
                    let e = self.traces.entry((ch, kk, step)).or_insert((0, 0.0, 0.0));
                    e.0 += 1;
                    e.1 += before[i];
                    e.2 += after[i];
                }
            }
        }
        if let Some(h) = &out.hra {
            let phi = g.value(h.phi);
            let per = phi.numel() / phi.dims()[0];
            for (bi, chunk) in phi.data().chunks(per).enumerate() {
                self.attention.push(AttentionRecord {
                    t0: t0s.get(bi).copied().unwrap_or(0),
                    phi: chunk.to_vec(),
                });
            }
        }
    }

    pub fn gmre_summaries(&self) -> &[GmreLayerSummary] {
        &self.layers
    }

    pub fn trace_rows(&self) -> Vec<ClusterTraceRow> {
        let layer = self.trace_layer.unwrap_or(0);
        self.traces
            .iter()
            .map(|(&(channel, component, step), &(count, sb, sa))| ClusterTraceRow {
                layer,
                channel,
                component,
                step,
                count,
                mean_before: sb / count as f64,
                mean_after: sa / count as f64,
            })
            .collect()
    }

    pub fn gmre_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.layers)? + "\n")
    }

    pub fn attention_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.attention)? + "\n")
    }

    pub fn write_traces_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| GmrlError::Data(format!("csv write: {e}"));
        for row in self.trace_rows() {
            w.serialize(row).map_err(err)?;
        }
        w.flush().map_err(|e| GmrlError::Data(format!("csv write: {e}")))
    }
}
