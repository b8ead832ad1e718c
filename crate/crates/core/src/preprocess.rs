//! Per-model dataset assembly: target filtering, the 80/20 split and
//! 95th-percentile outlier removal on training data.
//!
//! Every quantile in the project goes through [`percentile`]: linear
//! interpolation between order statistics at position `(n - 1) * q`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cohort::{Cohort, Feature};
use crate::regimen::Regimen;

pub const TRAIN_FRACTION: f64 = 0.8;
pub const OUTLIER_QUANTILE: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PreprocessError {
    #[error("percentile of an empty collection")]
    EmptyInput,
    #[error("quantile {0} outside [0, 1]")]
    InvalidQuantile(f64),
    #[error("cannot split {0} rows; at least 5 are required")]
    TooFewRows(usize),
}

/// Linear-interpolation quantile of unsorted values.
pub fn percentile(values: &[f64], q: f64) -> Result<f64, PreprocessError> {
    if values.is_empty() {
        return Err(PreprocessError::EmptyInput);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    percentile_sorted(&sorted, q)
}

/// As [`percentile`], for values already sorted ascending.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> Result<f64, PreprocessError> {
    if sorted.is_empty() {
        return Err(PreprocessError::EmptyInput);
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(PreprocessError::InvalidQuantile(q));
    }
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= sorted.len() {
        return Ok(sorted[lo]);
    }
    Ok(sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]))
}

pub fn median(values: &[f64]) -> Result<f64, PreprocessError> {
    percentile(values, 0.5)
}

/// Visits of one current-regimen group whose prescription is among `targets`.
pub fn model_dataset(group: &Cohort, targets: &[Regimen]) -> Cohort {
    group.filtered(|v| targets.contains(&v.prescribed_regimen))
}

/// Plain (unstratified) random 80/20 split. Both halves keep the input's
/// relative row order.
pub fn split(cohort: &Cohort, seed: u64) -> Result<(Cohort, Cohort), PreprocessError> {
    let n = cohort.len();
    if n < 5 {
        return Err(PreprocessError::TooFewRows(n));
    }
    let n_train = (TRAIN_FRACTION * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut in_train = vec![false; n];
    for &i in &order[..n_train] {
        in_train[i] = true;
    }
    let (mut train, mut test) = (Vec::with_capacity(n_train), Vec::with_capacity(n - n_train));
    for (v, t) in cohort.visits.iter().zip(in_train) {
        if t {
            train.push(v.clone());
        } else {
            test.push(v.clone());
        }
    }
    Ok((
        Cohort::new(train, cohort.provenance.clone()),
        Cohort::new(test, cohort.provenance.clone()),
    ))
}

/// Drops every row where any continuous column strictly exceeds that column's
/// 95th percentile. Thresholds are computed once, on the input.
pub fn remove_outliers_p95(train: &Cohort) -> Cohort {
    if train.is_empty() {
        return train.clone();
    }
    let thresholds: Vec<(Feature, f64)> = Feature::CONTINUOUS
        .iter()
        .map(|&f| {
            let col: Vec<f64> = train.iter().map(|v| f.value(v)).collect();
            (f, percentile(&col, OUTLIER_QUANTILE).expect("non-empty"))
        })
        .collect();
    let kept = train.filtered(|v| thresholds.iter().all(|&(f, t)| f.value(v) <= t));
    log::debug!(
        "outlier removal kept {} of {} training rows",
        kept.len(),
        train.len()
    );
    kept
}
