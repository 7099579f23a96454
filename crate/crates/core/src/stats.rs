//! Bootstrap error bars and squared-error comparisons of reconstructions.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detectors::Povm;
use crate::error::{Error, Result};
use crate::sampler::{stream_rng, Dataset};

/// Largest tolerated fraction of failed repetitions.
pub const MAX_FAILURE_FRACTION: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub n_repetitions: usize,
    pub seed: u64,
    pub mean: Vec<f64>,
    pub stdev: Vec<f64>,
    /// Messages from repetitions whose estimator failed (skipped).
    pub failures: Vec<String>,
}

/// Resamples whole records with replacement to the original size, reruns
/// `estimator` on each copy and reports per-entry means and standard
/// deviations. Repetition `r` draws from stream `r` of `seed`.
pub fn bootstrap<F>(data: &Dataset, n_reps: usize, seed: u64, estimator: F) -> Result<BootstrapReport>
where
    F: Fn(&Dataset) -> Result<Vec<f64>> + Sync,
{
    if n_reps < 2 {
        return Err(Error::Validation(format!("bootstrap needs at least 2 repetitions, got {n_reps}")));
    }
    if data.is_empty() {
        return Err(Error::Validation("cannot bootstrap an empty dataset".into()));
    }
    let n = data.len();
    let outputs: Vec<Result<Vec<f64>>> = (0..n_reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(seed, r as u64);
            let records = (0..n).map(|_| data.records[rng.random_range(0..n)]).collect();
            estimator(&data.with_records(records))
        })
        .collect();
    let mut good: Vec<Vec<f64>> = Vec::with_capacity(n_reps);
    let mut failures = Vec::new();
    for (r, out) in outputs.into_iter().enumerate() {
        match out {
            Ok(v) if good.first().is_none_or(|g| g.len() == v.len()) => good.push(v),
            Ok(v) => failures.push(format!("repetition {r}: {} entries, expected {}", v.len(), good[0].len())),
            Err(e) => failures.push(format!("repetition {r}: {e}")),
        }
    }
    if failures.len() as f64 > MAX_FAILURE_FRACTION * n_reps as f64 || good.len() < 2 {
        return Err(Error::Bootstrap { failures: failures.len(), repetitions: n_reps });
    }
    let (mean, stdev) = column_moments(&good);
    Ok(BootstrapReport { n_repetitions: n_reps, seed, mean, stdev, failures })
}

fn column_moments(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let k = rows.len() as f64;
    let width = rows[0].len();
    let mean: Vec<f64> = (0..width).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / k).collect();
    let stdev = (0..width)
        .map(|j| (rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / (k - 1.0)).sqrt())
        .collect();
    (mean, stdev)
}

/// An entry `⟨row|P_outcome|col⟩` (real part).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Entry {
    pub outcome: usize,
    pub row: usize,
    pub col: usize,
}

impl Entry {
    pub fn diagonal(outcome: usize, level: usize) -> Self {
        Self { outcome, row: level, col: level }
    }
}

pub type EntryMap = BTreeMap<Entry, f64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MseComparison {
    pub entries: Vec<Entry>,
    pub squared_errors_a: Vec<f64>,
    pub squared_errors_b: Vec<f64>,
    pub median_a: f64,
    pub median_b: f64,
    /// Requested entries absent from either reconstruction or the truth.
    pub missing: Vec<Entry>,
}

/// Per-entry squared errors of two reconstructions against `truth`.
pub fn compare_mse(a: &EntryMap, b: &EntryMap, truth: &Povm, entries: &[Entry]) -> MseComparison {
    let mut out = MseComparison {
        entries: Vec::new(),
        squared_errors_a: Vec::new(),
        squared_errors_b: Vec::new(),
        median_a: f64::NAN,
        median_b: f64::NAN,
        missing: Vec::new(),
    };
    for e in entries {
        let t = truth_entry(truth, e);
        match (a.get(e), b.get(e), t) {
            (Some(va), Some(vb), Some(t)) => {
                out.entries.push(*e);
                out.squared_errors_a.push((va - t).powi(2));
                out.squared_errors_b.push((vb - t).powi(2));
            }
            _ => out.missing.push(*e),
        }
    }
    out.median_a = median(&out.squared_errors_a);
    out.median_b = median(&out.squared_errors_b);
    out
}

pub fn truth_entry(truth: &Povm, e: &Entry) -> Option<f64> {
    let p = truth.elements.get(e.outcome)?;
    (e.row < p.dim() && e.col < p.dim()).then(|| p.get(e.row, e.col).re)
}

/// Median of finite values; NaN for an empty slice.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}
