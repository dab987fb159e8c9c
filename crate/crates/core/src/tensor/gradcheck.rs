use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, ParamStore, Var};
use crate::error::{GmrlError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub delta: f64,
    /// Maximum tolerated relative error.
    pub tol: f64,
    /// Cap on checked entries per parameter; `None` checks all of them.
    pub max_entries_per_param: Option<usize>,
    /// Seed for choosing which entries to check when capped.
    pub seed: u64,
    /// Denominator floor of the relative error, so that entries whose true
    /// gradient is zero are judged on absolute error.
    pub rel_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            delta: 1e-4,
            tol: 1e-3,
            max_entries_per_param: None,
            seed: 0,
            rel_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub entries_checked: usize,
    /// Entries left out because a perturbation crossed into another smooth
    /// region of a piecewise loss.
    #[serde(default)]
    pub entries_skipped: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_entry: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub delta: f64,
    pub tol: f64,
    pub loss: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tol
    }

    pub fn entries_checked(&self) -> usize {
        self.params.iter().map(|p| p.entries_checked).sum()
    }

    pub fn entries_skipped(&self) -> usize {
        self.params.iter().map(|p| p.entries_skipped).sum()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the gradients produced by [`Graph::backward`] against central
/// finite differences `(f(θ+δe_i) - f(θ-δe_i)) / 2δ`.
///
/// `loss_fn` builds the scalar loss on a fresh graph from the current
/// parameter values; it must be deterministic. On return the store holds the
/// analytic gradients and unperturbed values.
pub fn grad_check<F>(store: &mut ParamStore, mut loss_fn: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Graph) -> Result<Var>,
{
    grad_check_piecewise(store, |s, g| Ok((loss_fn(s, g)?, 0)), opts)
}

/// [`grad_check`] for losses that are only piecewise smooth. `loss_fn` also
/// returns a key naming the smooth piece it evaluated (for example a hash of
/// argmax choices and ReLU signs). An entry is compared only when both
/// perturbed evaluations report the unperturbed key; otherwise the central
/// difference straddles a kink and the entry is counted as skipped.
pub fn grad_check_piecewise<F>(store: &mut ParamStore, mut loss_fn: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Graph) -> Result<(Var, u64)>,
{
    if !(opts.delta > 0.0) {
        return Err(GmrlError::Config(format!(
            "grad_check delta must be positive, got {}",
            opts.delta
        )));
    }
    let mut g = Graph::new();
    let (loss, region) = loss_fn(store, &mut g)?;
    let base = g.value(loss).item();
    g.backward(loss, store)?;
    drop(g);

    let mut eval = |store: &ParamStore| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let (loss, key) = loss_fn(store, &mut g)?;
        Ok((g.value(loss).item(), key))
    };
    let (again, again_region) = eval(store)?;
    if again.to_bits() != base.to_bits() || again_region != region {
        return Err(GmrlError::Numeric(format!(
            "loss function is not deterministic: {base:e} vs {again:e}"
        )));
    }

    let ids: Vec<_> = store.ids().collect();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.value(id).numel();
        let entries: Vec<usize> = match opts.max_entries_per_param {
            Some(cap) if cap < n => {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (id.index() as u64).wrapping_mul(0x9E37_79B9));
                let mut picked = sample(&mut rng, n, cap).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..n).collect(),
        };
        let analytic = store.grad(id).clone();
        let mut check = ParamCheck {
            name: store.get(id).name.clone(),
            entries_checked: 0,
            entries_skipped: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_entry: 0,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
        };
        let mut first = true;
        for e in entries {
            let original = store.value(id).data()[e];
            store.get_mut(id).value.data_mut()[e] = original + opts.delta;
            let plus = eval(store);
            store.get_mut(id).value.data_mut()[e] = original - opts.delta;
            let minus = eval(store);
            store.get_mut(id).value.data_mut()[e] = original;
            let ((plus, plus_region), (minus, minus_region)) = (plus?, minus?);
            if plus_region != region || minus_region != region {
                check.entries_skipped += 1;
                continue;
            }
            check.entries_checked += 1;
            let numeric = (plus - minus) / (2.0 * opts.delta);
            let a = analytic.data()[e];
            let rel = relative_error(a, numeric, opts.rel_floor);
            check.max_abs_error = check.max_abs_error.max((a - numeric).abs());
            if first || rel > check.max_rel_error {
                first = false;
                check.max_rel_error = rel;
                check.worst_entry = e;
                check.analytic_at_worst = a;
                check.numeric_at_worst = numeric;
            }
        }
        params.push(check);
    }
    Ok(GradCheckReport {
        delta: opts.delta,
        tol: opts.tol,
        loss: base,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Init, Shape, Tensor};

    fn store_with(values: &[(&str, Vec<f64>)]) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        for (name, v) in values {
            let id = store
                .register(*name, Shape::new(vec![v.len()]).unwrap(), Init::Zeros, &mut rng)
                .unwrap();
            store
                .set_value(id, Tensor::from_vec(&[v.len()], v.clone()).unwrap())
                .unwrap();
        }
        store
    }

    #[test]
    fn quadratic_is_exact_up_to_roundoff() {
        let mut store = store_with(&[("p", vec![1.0, -2.0, 0.5])]);
        let p = store.id("p").unwrap();
        let report = grad_check(
            &mut store,
            |s, g| {
                let v = g.param(s, p)?;
                let sq = g.mul(v, v)?;
                g.sum_all(sq)
            },
            &GradCheckOptions {
                tol: 1e-8,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.max_rel_error() < 1e-8);
        assert_eq!(store.grad(p).data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn unused_parameter_has_zero_gradient_both_ways() {
        let mut store = store_with(&[("used", vec![1.0, 2.0]), ("unused", vec![3.0])]);
        let used = store.id("used").unwrap();
        let unused = store.id("unused").unwrap();
        let report = grad_check(
            &mut store,
            |s, g| {
                let v = g.param(s, used)?;
                g.sum_all(v)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(store.grad(unused).data(), &[0.0]);
        let row = report.params.iter().find(|p| p.name == "unused").unwrap();
        assert_eq!(row.max_abs_error, 0.0);
        assert_eq!(row.numeric_at_worst, 0.0);
    }

    #[test]
    fn nondeterminism_is_detected() {
        let mut store = store_with(&[("p", vec![1.0])]);
        let p = store.id("p").unwrap();
        let mut calls = 0.0;
        let err = grad_check(
            &mut store,
            |s, g| {
                calls += 1.0;
                let v = g.param(s, p)?;
                let v = g.add_scalar(v, calls)?;
                g.sum_all(v)
            },
            &GradCheckOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, GmrlError::Numeric(_)));
    }

    #[test]
    fn sampling_caps_entries() {
        let mut store = store_with(&[("p", (0..50).map(f64::from).collect())]);
        let p = store.id("p").unwrap();
        let report = grad_check(
            &mut store,
            |s, g| {
                let v = g.param(s, p)?;
                let t = g.tanh(v)?;
                g.sum_all(t)
            },
            &GradCheckOptions {
                max_entries_per_param: Some(7),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(report.entries_checked(), 7);
    }

    #[test]
    fn straddled_kinks_are_skipped() {
        let mut store = store_with(&[("p", vec![5e-5, 1.0, -0.5])]);
        let p = store.id("p").unwrap();
        let report = grad_check_piecewise(
            &mut store,
            |s, g| {
                let v = g.param(s, p)?;
                let signs: Vec<bool> = g.value(v).data().iter().map(|x| *x > 0.0).collect();
                let key = signs.iter().fold(0u64, |k, &b| k * 2 + b as u64);
                let r = g.relu(v)?;
                Ok((g.sum_all(r)?, key))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.entries_checked(), 2);
        assert_eq!(report.entries_skipped(), 1);
        assert!(report.passed());
    }
}
