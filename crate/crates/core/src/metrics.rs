//! Confusion-matrix accounting, accuracy, mean IoU and the assignment solver
//! used to map clusters onto classes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::IGNORE_LABEL;
use crate::numerics::Matrix;

/// `n × n` pixel counts; entry (p, g) counts pixels predicted `p` with ground truth `g`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        ConfusionMatrix {
            n: n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn from_counts(n_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != n_classes * n_classes {
            return Err(Error::Shape(format!(
                "{n_classes}x{n_classes} confusion matrix needs {} counts, got {}",
                n_classes * n_classes,
                counts.len()
            )));
        }
        Ok(ConfusionMatrix { n: n_classes, counts })
    }

    pub fn n_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, pred: usize, gt: usize) -> u64 {
        self.counts[pred * self.n + gt]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one count per pixel whose ground truth is not ignored.
    pub fn accumulate(&mut self, pred: &[usize], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!(
                "{} predictions for {} labels",
                pred.len(),
                gt.len()
            )));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g == IGNORE_LABEL {
                continue;
            }
            if p >= self.n {
                return Err(Error::Contract(format!(
                    "prediction {p} out of range for {} classes",
                    self.n
                )));
            }
            if g as usize >= self.n {
                return Err(Error::Contract(format!(
                    "label {g} out of range for {} classes",
                    self.n
                )));
            }
            self.counts[p * self.n + g as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n != self.n {
            return Err(Error::Shape("cannot merge confusion matrices of different size".into()));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Moves row `k` to row `perm[k]`.
    pub fn permute_rows(&self, perm: &[usize]) -> Result<ConfusionMatrix> {
        if perm.len() != self.n {
            return Err(Error::Shape("permutation length differs from class count".into()));
        }
        let mut out = ConfusionMatrix::new(self.n);
        for (k, &to) in perm.iter().enumerate() {
            out.counts[to * self.n..(to + 1) * self.n]
                .copy_from_slice(&self.counts[k * self.n..(k + 1) * self.n]);
        }
        Ok(out)
    }

    /// Counts as an `f64` profit matrix.
    pub fn as_profit(&self) -> Matrix {
        Matrix::from_vec(self.n, self.n, self.counts.iter().map(|&c| c as f64).collect())
            .expect("square")
    }

    /// `trace / total`.
    pub fn accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::EmptyEvaluation);
        }
        let trace: u64 = (0..self.n).map(|c| self.get(c, c)).sum();
        Ok(trace as f64 / total as f64)
    }

    /// Per-class IoU, `None` for classes whose union is empty.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        (0..self.n)
            .map(|c| {
                let row: u64 = (0..self.n).map(|g| self.get(c, g)).sum();
                let col: u64 = (0..self.n).map(|p| self.get(p, c)).sum();
                let tp = self.get(c, c);
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over classes with a non-empty union.
    pub fn miou(&self) -> Result<f64> {
        let ious: Vec<f64> = self.class_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            return Err(Error::EmptyEvaluation);
        }
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

/// Solution of the assignment problem.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// Row `k` is matched to column `perm[k]`.
    pub perm: Vec<usize>,
    /// `Σ profit[k, perm[k]]`, summed in row order.
    pub total: f64,
}

/// Permutation maximizing total profit on a square matrix.
///
/// Among optimal permutations the lexicographically smallest is returned.
pub fn hungarian(profit: &Matrix) -> Result<Assignment> {
    let k = profit.rows();
    if profit.cols() != k {
        return Err(Error::Shape(format!(
            "assignment needs a square matrix, got {}x{}",
            profit.rows(),
            profit.cols()
        )));
    }
    if k == 0 {
        return Ok(Assignment { perm: Vec::new(), total: 0.0 });
    }
    let scale: f64 = (0..k)
        .map(|r| profit.row(r).iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .sum();
    let tol = 1e-12 * (1.0 + scale);

    let rows: Vec<usize> = (0..k).collect();
    let cols: Vec<usize> = (0..k).collect();
    let best = max_profit(profit, &rows, &cols);

    let mut perm = vec![usize::MAX; k];
    let mut free: Vec<usize> = (0..k).collect();
    let mut fixed = 0.0;
    for r in 0..k {
        let rest_rows: Vec<usize> = ((r + 1)..k).collect();
        let mut chosen = None;
        for (pos, &c) in free.iter().enumerate() {
            let rest_cols: Vec<usize> = free.iter().copied().filter(|&x| x != c).collect();
            let value = fixed + profit.get(r, c) + max_profit(profit, &rest_rows, &rest_cols);
            if value >= best - tol {
                chosen = Some((pos, c));
                break;
            }
        }
        let (pos, c) = chosen.expect("an optimal completion always exists");
        perm[r] = c;
        fixed += profit.get(r, c);
        free.remove(pos);
    }
    let total = (0..k).map(|r| profit.get(r, perm[r])).sum();
    Ok(Assignment { perm, total })
}

/// Best total profit of the sub-problem on the given rows and columns.
fn max_profit(profit: &Matrix, rows: &[usize], cols: &[usize]) -> f64 {
    let n = rows.len();
    if n == 0 {
        return 0.0;
    }
    let cost: Vec<f64> = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| -profit.get(r, c)))
        .collect();
    let assign = min_cost_assignment(&cost, n);
    assign
        .iter()
        .enumerate()
        .map(|(i, &j)| profit.get(rows[i], cols[j]))
        .sum()
}

/// Dense O(n³) shortest-augmenting-path solver on an `n × n` row-major cost
/// matrix. Returns the column assigned to each row.
fn min_cost_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// One line of the metrics report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub representation_dim: usize,
    pub probe: String,
    pub accuracy: f64,
    pub miou: f64,
    pub split: String,
    pub seed: u64,
}

pub const CSV_HEADER: &str = "method,representation_dim,probe,accuracy,miou,split,seed";

pub fn rows_to_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.method, r.representation_dim, r.probe, r.accuracy, r.miou, r.split, r.seed
        );
    }
    s
}

pub fn write_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    fs::write(path, rows_to_csv(rows))?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricRow>> {
    parse_csv(&fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?)
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        other => {
            return Err(Error::Contract(format!(
                "metrics CSV header mismatch: {other:?}"
            )))
        }
    }
    let bad = |line: &str| Error::Contract(format!("malformed metrics row: {line:?}"));
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad(line));
            }
            Ok(MetricRow {
                method: f[0].to_string(),
                representation_dim: f[1].parse().map_err(|_| bad(line))?,
                probe: f[2].to_string(),
                accuracy: f[3].parse().map_err(|_| bad(line))?,
                miou: f[4].parse().map_err(|_| bad(line))?,
                split: f[5].to_string(),
                seed: f[6].parse().map_err(|_| bad(line))?,
            })
        })
        .collect()
}
