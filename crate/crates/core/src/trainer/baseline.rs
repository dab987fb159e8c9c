use serde::{Deserialize, Serialize};

use super::PreparedData;
use crate::data::WindowedSample;
use crate::error::{GmrlError, Result};
use crate::model::{ForecastReport, ScoreAccumulator};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BaselineKind {
    /// Every horizon repeats the last observed value.
    Persistence,
    /// Mean of the training values sharing the target's position in the
    /// cycle, per (location, source).
    SeasonalMean { period: usize },
}

impl BaselineKind {
    pub fn name(&self) -> String {
        match self {
            BaselineKind::Persistence => "persistence".into(),
            BaselineKind::SeasonalMean { period } => format!("seasonal_mean_{period}"),
        }
    }
}

/// Scores a baseline on `samples` exactly like the model is scored.
pub fn baseline_forecast(kind: BaselineKind, data: &PreparedData, samples: &[WindowedSample]) -> Result<ForecastReport> {
    if samples.is_empty() {
        return Err(GmrlError::Data("cannot score a baseline on an empty split".into()));
    }
    let ds = &data.dataset;
    let (nl, ns) = (ds.locations(), ds.sources());
    let plane = nl * ns;
    let (t_in, horizon) = (data.input_len, data.horizon);
    let seasonal = match kind {
        BaselineKind::Persistence => None,
        BaselineKind::SeasonalMean { period } => {
            if period == 0 {
                return Err(GmrlError::Config("seasonal period must be at least 1".into()));
            }
            let train = data.split.train_range();
            let values = ds.values().data();
            let mut sums = vec![0.0; period * plane];
            let mut counts = vec![0usize; period];
            for t in train.start..train.end {
                let phase = t % period;
                counts[phase] += 1;
                for (j, v) in values[t * plane..(t + 1) * plane].iter().enumerate() {
                    sums[phase * plane + j] += v;
                }
            }
            if let Some(phase) = counts.iter().position(|&c| c == 0) {
                return Err(GmrlError::Data(format!(
                    "training split never covers phase {phase} of period {period}"
                )));
            }
            for (i, s) in sums.iter_mut().enumerate() {
                *s /= counts[i / plane] as f64;
            }
            Some((period, sums))
        }
    };

    let mut acc = ScoreAccumulator::new(ds.source_ids().to_vec(), horizon, nl);
    for w in samples {
        let mut pred = Vec::with_capacity(horizon * plane);
        for o in 0..horizon {
            match &seasonal {
                None => pred.extend_from_slice(&w.x.data()[(t_in - 1) * plane..t_in * plane]),
                Some((period, means)) => {
                    let phase = (w.t0 + t_in + o) % period;
                    pred.extend_from_slice(&means[phase * plane..(phase + 1) * plane]);
                }
            }
        }
        let pred = Tensor::from_vec(&[horizon, nl, ns], pred)?;
        acc.add(&data.norm.denormalize(&pred), &data.norm.denormalize(&w.y))?;
    }
    acc.finish(kind.name())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{NormMode, SplitSpec, TtsDataset};

    fn prepared(values: Vec<f64>, horizon: usize) -> PreparedData {
        let steps = values.len();
        let ds = TtsDataset::new(
            Tensor::from_vec(&[steps, 1, 1], values).unwrap(),
            (0..steps).map(|t| crate::data::format_timestamp(t as i64 * 3600)).collect(),
            vec!["l".into()],
            vec!["s".into()],
        )
        .unwrap();
        let split = SplitSpec::by_fraction(steps, 0.6, 0.2);
        PreparedData::new(&ds, split, 4, horizon, NormMode::Global).unwrap()
    }

    #[test]
    fn persistence_on_constant_series_is_exact() {
        let data = prepared(vec![3.0; 60], 2);
        let r = baseline_forecast(BaselineKind::Persistence, &data, &data.test).unwrap();
        assert_eq!(r.overall.mae, 0.0);
    }

    #[test]
    fn persistence_on_unit_drift() {
        let data = prepared((0..60).map(|t| t as f64).collect(), 1);
        let r = baseline_forecast(BaselineKind::Persistence, &data, &data.test).unwrap();
        assert!((r.overall.mae - 1.0).abs() < 1e-9);
    }

    #[test]
    fn seasonal_mean_on_periodic_data() {
        let data = prepared((0..120).map(|t| ((t % 6) as f64 * 1.3).sin()).collect(), 3);
        let r = baseline_forecast(BaselineKind::SeasonalMean { period: 6 }, &data, &data.test).unwrap();
        assert!(r.overall.mae < 1e-12, "{}", r.overall.mae);
        let miss = baseline_forecast(BaselineKind::SeasonalMean { period: 5 }, &data, &data.test).unwrap();
        assert!(miss.overall.mae > 0.1);
    }
}
