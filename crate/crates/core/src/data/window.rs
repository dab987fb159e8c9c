use serde::{Deserialize, Serialize};

use super::{StepRange, TtsDataset};
use crate::error::{GmrlError, Result};
use crate::tensor::Tensor;

/// Contiguous chronological split: `train` steps, then `val`, then `test`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSpec {
    /// Splits `total` steps by fractions, giving the remainder to test.
    pub fn by_fraction(total: usize, train: f64, val: f64) -> Self {
        let tr = (total as f64 * train).round() as usize;
        let va = (total as f64 * val).round() as usize;
        SplitSpec {
            train: tr,
            val: va,
            test: total.saturating_sub(tr + va),
        }
    }

    pub fn validate(&self, total_steps: usize) -> Result<()> {
        let sum = self.train + self.val + self.test;
        if sum > total_steps {
            return Err(GmrlError::Config(format!(
                "split {}/{}/{} needs {sum} steps but the dataset has {total_steps}",
                self.train, self.val, self.test
            )));
        }
        if self.train == 0 {
            return Err(GmrlError::Config("training split is empty".into()));
        }
        Ok(())
    }

    pub fn train_range(&self) -> StepRange {
        StepRange {
            start: 0,
            end: self.train,
        }
    }

    pub fn val_range(&self) -> StepRange {
        StepRange {
            start: self.train,
            end: self.train + self.val,
        }
    }

    pub fn test_range(&self) -> StepRange {
        StepRange {
            start: self.train + self.val,
            end: self.train + self.val + self.test,
        }
    }
}

/// One input/target pair. `t0` is the dataset index of the first input step.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedSample {
    /// `(T, L, S)`
    pub x: Tensor,
    /// `(O, L, S)`, starting at `t0 + T`
    pub y: Tensor,
    pub t0: usize,
}

/// Stride-1 windows lying entirely inside `range`.
pub fn window(ds: &TtsDataset, range: StepRange, input_len: usize, horizon: usize) -> Result<Vec<WindowedSample>> {
    let need = input_len + horizon;
    if input_len == 0 || horizon == 0 {
        return Err(GmrlError::Config("input length and horizon must be positive".into()));
    }
    if range.end > ds.steps() {
        return Err(GmrlError::Data(format!(
            "range [{}, {}) exceeds {} steps",
            range.start,
            range.end,
            ds.steps()
        )));
    }
    if range.len() < need {
        return Err(GmrlError::Data(format!(
            "split of {} steps is too short for windows of {input_len} + {horizon}; need at least {need}",
            range.len()
        )));
    }
    let (nl, ns) = (ds.locations(), ds.sources());
    let plane = nl * ns;
    let data = ds.values().data();
    let count = range.len() - need + 1;
    (0..count)
        .map(|k| {
            let t0 = range.start + k;
            let x = Tensor::from_vec(&[input_len, nl, ns], data[t0 * plane..(t0 + input_len) * plane].to_vec())?;
            let y = Tensor::from_vec(
                &[horizon, nl, ns],
                data[(t0 + input_len) * plane..(t0 + need) * plane].to_vec(),
            )?;
            Ok(WindowedSample { x, y, t0 })
        })
        .collect()
}

/// Stacks samples into `x: (B, T, L, S)` and `y: (B, O, L, S)`.
pub fn stack_batch(samples: &[&WindowedSample]) -> Result<(Tensor, Tensor)> {
    let first = samples
        .first()
        .ok_or_else(|| GmrlError::Data("empty batch".into()))?;
    let stack = |pick: fn(&WindowedSample) -> &Tensor| -> Result<Tensor> {
        let mut dims = vec![samples.len()];
        dims.extend_from_slice(pick(first).dims());
        let mut data = Vec::with_capacity(dims.iter().product());
        for s in samples {
            data.extend_from_slice(pick(s).data());
        }
        Tensor::from_vec(&dims, data)
    };
    Ok((stack(|s| &s.x)?, stack(|s| &s.y)?))
}
