use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{GmrlError, Result};
use crate::tensor::Tensor;

/// MAE and RMSE of one (source, horizon) pair over all locations and
/// windows. Horizons are numbered from 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub source: String,
    pub horizon: usize,
    pub mae: f64,
    pub rmse: f64,
    pub count: usize,
}

/// An aggregate row; `key` is a source id, `h{n}` or `all`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub key: String,
    pub mae: f64,
    pub rmse: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastReport {
    pub label: String,
    pub cells: Vec<ReportCell>,
    pub by_source: Vec<ReportRow>,
    pub by_horizon: Vec<ReportRow>,
    pub overall: ReportRow,
}

#[derive(Debug, Clone, Copy, Default)]
struct Sums {
    abs: f64,
    sq: f64,
    n: usize,
}

impl Sums {
    fn add(&mut self, other: Sums) {
        self.abs += other.abs;
        self.sq += other.sq;
        self.n += other.n;
    }

    fn row(&self, key: String) -> ReportRow {
        let n = self.n.max(1) as f64;
        ReportRow {
            key,
            mae: self.abs / n,
            rmse: (self.sq / n).sqrt(),
            count: self.n,
        }
    }
}

/// Accumulates absolute and squared residuals per (source, horizon) from
/// `(O, L, S)` forecast/target pairs in original units.
#[derive(Debug, Clone)]
pub struct ScoreAccumulator {
    source_ids: Vec<String>,
    horizon: usize,
    locations: usize,
    sums: Vec<Sums>,
}

impl ScoreAccumulator {
    pub fn new(source_ids: Vec<String>, horizon: usize, locations: usize) -> Self {
        let n = source_ids.len() * horizon;
        ScoreAccumulator {
            source_ids,
            horizon,
            locations,
            sums: vec![Sums::default(); n],
        }
    }

    pub fn add(&mut self, pred: &Tensor, target: &Tensor) -> Result<()> {
        let expect = [self.horizon, self.locations, self.source_ids.len()];
        if pred.shape() != target.shape() || pred.dims() != expect {
            return Err(GmrlError::ShapeMismatch {
                op: "score",
                lhs: pred.shape().clone(),
                rhs: target.shape().clone(),
            });
        }
        let ns = self.source_ids.len();
        for (i, (&p, &y)) in pred.data().iter().zip(target.data()).enumerate() {
            let s = i % ns;
            let o = i / (ns * self.locations);
            let r = p - y;
            let cell = &mut self.sums[s * self.horizon + o];
            cell.abs += r.abs();
            cell.sq += r * r;
            cell.n += 1;
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.sums.iter().all(|s| s.n == 0)
    }

    pub fn finish(self, label: impl Into<String>) -> Result<ForecastReport> {
        if self.is_empty() {
            return Err(GmrlError::Data("cannot score an empty split".into()));
        }
        let h = self.horizon;
        let mut cells = Vec::new();
        let mut by_source = Vec::new();
        let mut per_h = vec![Sums::default(); h];
        let mut all = Sums::default();
        for (s, id) in self.source_ids.iter().enumerate() {
            let mut src = Sums::default();
            for (o, ph) in per_h.iter_mut().enumerate() {
                let c = self.sums[s * h + o];
                let row = c.row(String::new());
                cells.push(ReportCell {
                    source: id.clone(),
                    horizon: o + 1,
                    mae: row.mae,
                    rmse: row.rmse,
                    count: c.n,
                });
                src.add(c);
                ph.add(c);
                all.add(c);
            }
            by_source.push(src.row(id.clone()));
        }
        Ok(ForecastReport {
            label: label.into(),
            cells,
            by_source,
            by_horizon: per_h.iter().enumerate().map(|(o, c)| c.row(format!("h{}", o + 1))).collect(),
            overall: all.row("all".into()),
        })
    }
}

impl ForecastReport {
    pub fn cell(&self, source: &str, horizon: usize) -> Option<&ReportCell> {
        self.cells.iter().find(|c| c.source == source && c.horizon == horizon)
    }

    /// Aligned plain-text table: one line per (source, horizon), then the
    /// aggregate rows.
    pub fn to_text(&self) -> String {
        let width = self
            .cells
            .iter()
            .map(|c| c.source.len())
            .chain([6])
            .max()
            .unwrap_or(6);
        let mut out = String::new();
        let _ = writeln!(out, "# {}", self.label);
        let _ = writeln!(out, "{:<width$}  {:>7}  {:>12}  {:>12}", "source", "horizon", "MAE", "RMSE");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{:<width$}  {:>7}  {:>12.6}  {:>12.6}",
                c.source, c.horizon, c.mae, c.rmse
            );
        }
        for r in self.by_source.iter().chain(&self.by_horizon).chain([&self.overall]) {
            let (src, hor) = if r.key.starts_with('h') && self.by_horizon.iter().any(|x| x.key == r.key) {
                ("*".to_string(), r.key[1..].to_string())
            } else if r.key == "all" {
                ("*".to_string(), "*".to_string())
            } else {
                (r.key.clone(), "*".to_string())
            };
            let _ = writeln!(out, "{:<width$}  {:>7}  {:>12.6}  {:>12.6}", src, hor, r.mae, r.rmse);
        }
        out
    }
}

/// Fraction of items whose predicted label maps to the true label under the
/// best one-to-one relabeling of predicted labels. Exhaustive for up to
/// eight labels per side, greedy on the contingency table beyond that.
pub fn permutation_accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if pred.is_empty() || pred.len() != truth.len() {
        return 0.0;
    }
    let kp = pred.iter().max().unwrap() + 1;
    let kt = truth.iter().max().unwrap() + 1;
    let mut table = vec![vec![0usize; kt]; kp];
    for (&p, &t) in pred.iter().zip(truth) {
        table[p][t] += 1;
    }
    let best = if kp <= 8 && kt <= 8 {
        fn search(table: &[Vec<usize>], row: usize, used: &mut Vec<bool>) -> usize {
            if row == table.len() {
                return 0;
            }
            // leaving this predicted label unmatched is allowed when kp > kt
            let mut best = search(table, row + 1, used);
            for t in 0..used.len() {
                if !used[t] {
                    used[t] = true;
                    best = best.max(table[row][t] + search(table, row + 1, used));
                    used[t] = false;
                }
            }
            best
        }
        search(&table, 0, &mut vec![false; kt])
    } else {
        let mut entries: Vec<(usize, usize, usize)> = (0..kp)
            .flat_map(|p| (0..kt).map(move |t| (p, t)))
            .map(|(p, t)| (table[p][t], p, t))
            .collect();
        entries.sort_by(|a, b| b.cmp(a));
        let (mut used_p, mut used_t) = (vec![false; kp], vec![false; kt]);
        let mut total = 0;
        for (n, p, t) in entries {
            if !used_p[p] && !used_t[t] {
                used_p[p] = true;
                used_t[t] = true;
                total += n;
            }
        }
        total
    };
    best as f64 / pred.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(residuals: &[f64]) -> ForecastReport {
        let mut acc = ScoreAccumulator::new(vec!["s".into()], 1, 1);
        for &r in residuals {
            let p = Tensor::from_vec(&[1, 1, 1], vec![r]).unwrap();
            let y = Tensor::from_vec(&[1, 1, 1], vec![0.0]).unwrap();
            acc.add(&p, &y).unwrap();
        }
        acc.finish("t").unwrap()
    }

    #[test]
    fn residual_examples() {
        let r = report(&[0.0, 0.0]);
        assert_eq!((r.overall.mae, r.overall.rmse), (0.0, 0.0));
        let r = report(&[2.0, -2.0, 2.0]);
        assert_eq!((r.overall.mae, r.overall.rmse), (2.0, 2.0));
        let r = report(&[0.0, 2.0]);
        assert_eq!(r.overall.mae, 1.0);
        assert!((r.overall.rmse - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn cells_cover_sources_and_horizons() {
        let ids: Vec<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        let mut acc = ScoreAccumulator::new(ids, 3, 2);
        let y = Tensor::zeros(crate::tensor::Shape::new(vec![3, 2, 2]).unwrap());
        let p = Tensor::from_vec(&[3, 2, 2], (0..12).map(|i| i as f64).collect()).unwrap();
        acc.add(&p, &y).unwrap();
        let r = acc.finish("x").unwrap();
        assert_eq!(r.cells.len(), 6);
        // source a, horizon 2: entries (o=1, l=0..2, s=0) = 4, 6
        assert_eq!(r.cell("a", 2).unwrap().mae, 5.0);
        for c in &r.cells {
            assert!(c.mae <= c.rmse);
        }
        let text = r.to_text();
        assert_eq!(text.lines().count(), 2 + 6 + 2 + 3 + 1);
        assert!(ScoreAccumulator::new(vec!["s".into()], 1, 1).finish("e").is_err());
    }

    #[test]
    fn permutation_matching() {
        assert_eq!(permutation_accuracy(&[2, 2, 0, 0, 1], &[0, 0, 1, 1, 2]), 1.0);
        assert_eq!(permutation_accuracy(&[0, 0, 0, 0], &[0, 0, 1, 1]), 0.5);
        assert_eq!(permutation_accuracy(&[0, 1, 2, 3], &[0, 0, 1, 1]), 0.5);
    }
}
