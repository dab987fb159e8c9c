//! Tensor time series: loading, validation, z-score normalization,
//! windowing and a synthetic generator with known cluster structure.

mod load;
mod norm;
mod synth;
mod window;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{GmrlError, Result};
use crate::tensor::Tensor;

pub use load::{load_csv, load_dataset, load_snapshot, save_csv, save_snapshot, DataFormat, Sidecar};
pub use norm::{zscore, NormMode, NormStats};
pub use synth::{generate_synthetic, ComponentSpec, SynthSpec};
pub use window::{stack_batch, window, SplitSpec, WindowedSample};

/// A validated `T_total x L x S` tensor time series.
#[derive(Debug, Clone, PartialEq)]
pub struct TtsDataset {
    values: Tensor,
    time_index: Vec<String>,
    location_ids: Vec<String>,
    source_ids: Vec<String>,
}

impl TtsDataset {
    pub fn new(
        values: Tensor,
        time_index: Vec<String>,
        location_ids: Vec<String>,
        source_ids: Vec<String>,
    ) -> Result<Self> {
        let dims = values.dims();
        if dims.len() != 3 {
            return Err(GmrlError::Data(format!(
                "dataset values must be rank 3 (time, location, source), got {}",
                values.shape()
            )));
        }
        if dims[0] != time_index.len() || dims[1] != location_ids.len() || dims[2] != source_ids.len() {
            return Err(GmrlError::Data(format!(
                "values {} disagree with {} timestamps, {} locations, {} sources",
                values.shape(),
                time_index.len(),
                location_ids.len(),
                source_ids.len()
            )));
        }
        if let Some(pos) = values.data().iter().position(|x| !x.is_finite()) {
            let (l, s) = (dims[1], dims[2]);
            return Err(GmrlError::Data(format!(
                "non-finite value at (t={}, l={}, s={})",
                pos / (l * s),
                (pos / s) % l,
                pos % s
            )));
        }
        check_time_index(&time_index)?;
        Ok(TtsDataset {
            values,
            time_index,
            location_ids,
            source_ids,
        })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn time_index(&self) -> &[String] {
        &self.time_index
    }

    pub fn location_ids(&self) -> &[String] {
        &self.location_ids
    }

    pub fn source_ids(&self) -> &[String] {
        &self.source_ids
    }

    pub fn steps(&self) -> usize {
        self.time_index.len()
    }

    pub fn locations(&self) -> usize {
        self.location_ids.len()
    }

    pub fn sources(&self) -> usize {
        self.source_ids.len()
    }

    /// Same metadata, new values of identical shape.
    pub fn with_values(&self, values: Tensor) -> Result<Self> {
        if values.shape() != self.values.shape() {
            return Err(GmrlError::ShapeMismatch {
                op: "with_values",
                lhs: self.values.shape().clone(),
                rhs: values.shape().clone(),
            });
        }
        Ok(TtsDataset {
            values,
            ..self.clone()
        })
    }
}

/// Parses an ISO-8601 timestamp (RFC 3339, naive date-time taken as UTC, or
/// a bare date) into Unix seconds.
pub fn parse_timestamp(s: &str) -> Option<i64> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt.and_utc().timestamp());
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|dt| dt.and_utc().timestamp())
}

pub fn format_timestamp(secs: i64) -> String {
    DateTime::from_timestamp(secs, 0)
        .map(|dt| dt.format("%Y-%m-%dT%H:%M:%SZ").to_string())
        .unwrap_or_else(|| secs.to_string())
}

fn check_time_index(index: &[String]) -> Result<()> {
    let secs = index
        .iter()
        .enumerate()
        .map(|(i, s)| {
            parse_timestamp(s).ok_or_else(|| GmrlError::Data(format!("row {i}: bad timestamp `{s}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let Some(step) = secs.windows(2).map(|w| w[1] - w[0]).next() else {
        return Ok(());
    };
    for (i, w) in secs.windows(2).enumerate() {
        let gap = w[1] - w[0];
        if gap <= 0 {
            return Err(GmrlError::Data(format!(
                "timestamps not strictly increasing at step {}: `{}` then `{}`",
                i + 1,
                index[i],
                index[i + 1]
            )));
        }
        if gap != step {
            return Err(GmrlError::Data(format!(
                "timestamps not equally spaced at step {}: gap {gap}s, expected {step}s",
                i + 1
            )));
        }
    }
    Ok(())
}

/// Indices of a time-ordered range `[start, end)` of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRange {
    pub start: usize,
    pub end: usize,
}

impl StepRange {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    #[test]
    fn timestamps_parse_in_common_iso_forms() {
        let a = parse_timestamp("2024-01-01T00:00:00Z").unwrap();
        assert_eq!(parse_timestamp("2024-01-01T00:00:00"), Some(a));
        assert_eq!(parse_timestamp("2024-01-01 00:00:00"), Some(a));
        assert_eq!(parse_timestamp("2024-01-01"), Some(a));
        assert_eq!(parse_timestamp("2024-01-01T01:00:00+01:00"), Some(a));
        assert!(parse_timestamp("yesterday").is_none());
        assert_eq!(format_timestamp(a), "2024-01-01T00:00:00Z");
    }

    #[test]
    fn dataset_validation() {
        let ok = TtsDataset::new(
            Tensor::from_vec(&[2, 1, 1], vec![1.0, 2.0]).unwrap(),
            vec!["2024-01-01T00:00:00Z".into(), "2024-01-01T01:00:00Z".into()],
            ids("l", 1),
            ids("s", 1),
        );
        assert!(ok.is_ok());

        let backwards = TtsDataset::new(
            Tensor::from_vec(&[2, 1, 1], vec![1.0, 2.0]).unwrap(),
            vec!["2024-01-01T01:00:00Z".into(), "2024-01-01T00:00:00Z".into()],
            ids("l", 1),
            ids("s", 1),
        );
        assert!(backwards.unwrap_err().to_string().contains("strictly increasing"));

        let uneven = TtsDataset::new(
            Tensor::from_vec(&[3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap(),
            vec![
                "2024-01-01T00:00:00Z".into(),
                "2024-01-01T01:00:00Z".into(),
                "2024-01-01T03:00:00Z".into(),
            ],
            ids("l", 1),
            ids("s", 1),
        );
        assert!(uneven.unwrap_err().to_string().contains("equally spaced"));
    }
}
