use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{format_timestamp, parse_timestamp, TtsDataset};
use crate::error::{GmrlError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub mean: f64,
    pub std: f64,
}

/// Recipe for a synthetic series with a known component per (location, source).
///
/// Each series is `mean_k + amplitude * sin(2π (t + phase) / period) +
/// std_k * ε₁ + noise_std * ε₂` with independent standard normal draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub k_true: usize,
    pub components: Vec<ComponentSpec>,
    /// Component id per (l, s), row-major `l * sources + s`. When absent,
    /// components are dealt round-robin over a seeded shuffle of the series,
    /// so every component owns at least one series.
    #[serde(default)]
    pub assignment: Option<Vec<usize>>,
    pub locations: usize,
    pub sources: usize,
    pub steps: usize,
    #[serde(default)]
    pub amplitude: f64,
    #[serde(default = "default_period")]
    pub period: f64,
    /// Draw a phase in `[0, period)` per series; otherwise all phases are 0.
    #[serde(default = "default_true")]
    pub random_phase: bool,
    #[serde(default)]
    pub noise_std: f64,
    pub seed: u64,
    #[serde(default = "default_start")]
    pub start: String,
    #[serde(default = "default_step_seconds")]
    pub step_seconds: i64,
}

fn default_period() -> f64 {
    24.0
}

fn default_true() -> bool {
    true
}

fn default_start() -> String {
    "2024-01-01T00:00:00Z".into()
}

fn default_step_seconds() -> i64 {
    3600
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let series = self.locations * self.sources;
        let bad = |m: String| Err(GmrlError::Config(m));
        if self.k_true == 0 {
            return bad("k_true must be at least 1".into());
        }
        if self.components.len() != self.k_true {
            return bad(format!(
                "{} component specs for k_true = {}",
                self.components.len(),
                self.k_true
            ));
        }
        if self.locations == 0 || self.sources == 0 || self.steps == 0 {
            return bad("locations, sources and steps must be positive".into());
        }
        if self.k_true > series {
            return bad(format!(
                "k_true = {} components cannot be assigned to {series} series",
                self.k_true
            ));
        }
        if self.components.iter().any(|c| !(c.std >= 0.0) || !c.mean.is_finite()) || !(self.noise_std >= 0.0) {
            return bad("component means must be finite and standard deviations non-negative".into());
        }
        if !(self.period > 0.0) || self.step_seconds <= 0 {
            return bad("period and step_seconds must be positive".into());
        }
        if parse_timestamp(&self.start).is_none() {
            return bad(format!("bad start timestamp `{}`", self.start));
        }
        if let Some(a) = &self.assignment {
            if a.len() != series {
                return bad(format!("assignment has {} entries for {series} series", a.len()));
            }
            if let Some(k) = a.iter().find(|&&k| k >= self.k_true) {
                return bad(format!("assignment names component {k} >= k_true"));
            }
        }
        Ok(())
    }
}

/// Generates the dataset and the ground-truth component of every (l, s),
/// row-major. Deterministic in `spec.seed`.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<(TtsDataset, Vec<usize>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let series = spec.locations * spec.sources;
    let labels = match &spec.assignment {
        Some(a) => a.clone(),
        None => {
            let mut order: Vec<usize> = (0..series).collect();
            order.shuffle(&mut rng);
            let mut labels = vec![0; series];
            for (j, &pos) in order.iter().enumerate() {
                labels[pos] = j % spec.k_true;
            }
            labels
        }
    };
    let phases: Vec<f64> = (0..series)
        .map(|_| {
            if spec.random_phase {
                rng.random_range(0.0..spec.period)
            } else {
                0.0
            }
        })
        .collect();

    let mut data = Vec::with_capacity(spec.steps * series);
    for t in 0..spec.steps {
        for (&k, &phase) in labels.iter().zip(&phases) {
            let c = spec.components[k];
            let seasonal = spec.amplitude * (2.0 * PI * (t as f64 + phase) / spec.period).sin();
            let e1: f64 = rng.sample(StandardNormal);
            let e2: f64 = rng.sample(StandardNormal);
            data.push(c.mean + seasonal + c.std * e1 + spec.noise_std * e2);
        }
    }
    let start = parse_timestamp(&spec.start).expect("validated");
    let ds = TtsDataset::new(
        Tensor::from_vec(&[spec.steps, spec.locations, spec.sources], data)?,
        (0..spec.steps)
            .map(|t| format_timestamp(start + t as i64 * spec.step_seconds))
            .collect(),
        (0..spec.locations).map(|l| format!("loc{l}")).collect(),
        (0..spec.sources).map(|s| format!("src{s}")).collect(),
    )?;
    Ok((ds, labels))
}
