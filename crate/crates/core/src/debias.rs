//! Trial emulation for one less-aggressive vs more-aggressive contrast.
//!
//! 1. A forest fit on the stay arm predicts each step-arm visit's HbA1c under
//!    the stay option; stay-arm visits keep their observed outcome.
//! 2. Those scores are cut into equal-width buckets over their joint range.
//! 3. Inside each bucket, visits are paired across arms greedily by
//!    standardized Euclidean distance, without replacement.
//! 4. The least similar pairs are discarded.

use std::cmp::Ordering;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{Cohort, Feature, PatientVisit};
use crate::forest::{ForestError, ForestModel, ForestParams, VisitEncoder};
use crate::regimen::{Group, Regimen, TreatmentOption};

/// Covariates used for similarity: age and the HbA1c and BMI histories.
pub const MATCH_FEATURES: [Feature; 11] = Feature::CONTINUOUS;

#[derive(Debug, Error)]
pub enum DebiasError {
    #[error("contrast {0}: {1}")]
    InvalidContrast(String, String),
    #[error("the {0} arm of contrast {1} is empty")]
    EmptyArm(&'static str, String),
    #[error("no scores to bucketize")]
    NoScores,
    #[error("bucket count must be at least 1")]
    ZeroBuckets,
    #[error("keep fraction {0} outside (0, 1]")]
    InvalidKeepFraction(f64),
    #[error("matching produced no pairs")]
    NoPairs,
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Stay,
    Step,
}

impl Arm {
    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Stay => "stay",
            Arm::Step => "step",
        }
    }
}

/// A two-arm treatment comparison within one current-regimen group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contrast {
    pub group: Group,
    pub stay: TreatmentOption,
    pub step: TreatmentOption,
}

impl Contrast {
    /// The step option must be strictly more aggressive than the stay option,
    /// except for a choice between two monotherapies of equal rank (metformin
    /// vs other hypoglycemic).
    pub fn new(
        group: Group,
        stay: impl Into<TreatmentOption>,
        step: impl Into<TreatmentOption>,
    ) -> Result<Contrast, DebiasError> {
        let c = Contrast {
            group,
            stay: stay.into(),
            step: step.into(),
        };
        let fail = |m: &str| Err(DebiasError::InvalidContrast(c.to_string(), m.to_string()));
        if c.stay == c.step {
            return fail("stay and step options coincide");
        }
        let overlap = c.stay.regimens().iter().any(|r| c.step.covers(*r));
        if overlap {
            return fail("arms overlap");
        }
        let admissible = |o: TreatmentOption| match o {
            TreatmentOption::FirstLine => group == Group::NoMedication,
            TreatmentOption::Regimen(r) => group.admits(r),
        };
        if !admissible(c.stay) || !admissible(c.step) {
            return fail("option not admissible for the group");
        }
        let (a, b) = (c.stay.aggressiveness(), c.step.aggressiveness());
        let same_rank_choice = a == b && a == 1;
        if b < a || (b == a && !same_rank_choice) {
            return fail("step option is not more aggressive than stay option");
        }
        Ok(c)
    }

    pub fn arm_of(&self, v: &PatientVisit) -> Option<Arm> {
        if v.group() != Some(self.group) {
            return None;
        }
        if self.stay.covers(v.prescribed_regimen) {
            Some(Arm::Stay)
        } else if self.step.covers(v.prescribed_regimen) {
            Some(Arm::Step)
        } else {
            None
        }
    }

    /// Prescriptions belonging to either arm.
    pub fn targets(&self) -> Vec<Regimen> {
        let mut t = self.stay.regimens();
        t.extend(self.step.regimens());
        t
    }

    pub fn option(&self, arm: Arm) -> TreatmentOption {
        match arm {
            Arm::Stay => self.stay,
            Arm::Step => self.step,
        }
    }
}

impl std::fmt::Display for Contrast {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {} vs {}", self.group, self.stay, self.step)
    }
}

/// Visits with arm labels and counterfactual scores, index-aligned.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ArmedCohort {
    pub visits: Vec<PatientVisit>,
    pub arms: Vec<Arm>,
    pub scores: Vec<f64>,
}

impl ArmedCohort {
    pub fn len(&self) -> usize {
        self.visits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visits.is_empty()
    }

    pub fn arm_count(&self, arm: Arm) -> usize {
        self.arms.iter().filter(|&&a| a == arm).count()
    }

    pub fn to_cohort(&self, provenance: &str) -> Cohort {
        Cohort::new(self.visits.clone(), provenance)
    }
}

/// Stay-arm visits score their observed `hba1c_after`; step-arm visits score
/// the prediction of a forest fit only on the stay arm. Visits outside both
/// arms are ignored.
pub fn counterfactual_scores(
    train: &Cohort,
    contrast: &Contrast,
    params: &ForestParams,
) -> Result<ArmedCohort, DebiasError> {
    let mut visits = Vec::new();
    let mut arms = Vec::new();
    for v in train.iter() {
        if let Some(a) = contrast.arm_of(v) {
            visits.push(v.clone());
            arms.push(a);
        }
    }
    let stay: Vec<&PatientVisit> = visits
        .iter()
        .zip(&arms)
        .filter(|(_, a)| **a == Arm::Stay)
        .map(|(v, _)| v)
        .collect();
    if stay.is_empty() {
        return Err(DebiasError::EmptyArm("stay", contrast.to_string()));
    }
    if stay.len() == visits.len() {
        return Err(DebiasError::EmptyArm("step", contrast.to_string()));
    }

    let encoder = VisitEncoder::fit(&visits);
    let x = encoder.encode(stay.iter().copied());
    let y: Vec<f64> = stay.iter().map(|v| v.hba1c_after).collect();
    let model = ForestModel::fit(&x, &y, params)?;
    let scores = visits
        .iter()
        .zip(&arms)
        .map(|(v, a)| match a {
            Arm::Stay => v.hba1c_after,
            Arm::Step => model.predict_row(&encoder.encode_row(v)),
        })
        .collect();
    Ok(ArmedCohort {
        visits,
        arms,
        scores,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Buckets {
    /// `k + 1` edges; bucket `j` is `[edges[j], edges[j+1])`, the last bucket
    /// closed on the right.
    pub edges: Vec<f64>,
    pub assignment: Vec<usize>,
    /// Every score was equal: a single bucket holds everything.
    pub degenerate: bool,
}

impl Buckets {
    pub fn count(&self) -> usize {
        self.edges.len() - 1
    }
}

pub fn bucketize(scores: &[f64], k: usize) -> Result<Buckets, DebiasError> {
    if k == 0 {
        return Err(DebiasError::ZeroBuckets);
    }
    if scores.is_empty() {
        return Err(DebiasError::NoScores);
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        log::warn!(
            "degenerate score range: all {} scores equal {lo}",
            scores.len()
        );
        return Ok(Buckets {
            edges: vec![lo, hi],
            assignment: vec![0; scores.len()],
            degenerate: true,
        });
    }
    let width = (hi - lo) / k as f64;
    let mut edges: Vec<f64> = (0..k).map(|j| lo + j as f64 * width).collect();
    edges.push(hi);
    let assignment = scores
        .iter()
        .map(|&s| {
            let mut j = (((s - lo) / width).floor() as usize).min(k - 1);
            // settle rounding at the edges against the stored edge values
            while j + 1 < k && s >= edges[j + 1] {
                j += 1;
            }
            while j > 0 && s < edges[j] {
                j -= 1;
            }
            j
        })
        .collect();
    Ok(Buckets {
        edges,
        assignment,
        degenerate: false,
    })
}

/// Per-feature mean and standard deviation of the matching pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl Standardizer {
    pub fn fit(visits: &[PatientVisit]) -> Standardizer {
        let n = visits.len().max(1) as f64;
        let mut means = Vec::with_capacity(MATCH_FEATURES.len());
        let mut sds = Vec::with_capacity(MATCH_FEATURES.len());
        for f in MATCH_FEATURES {
            let m = visits.iter().map(|v| f.value(v)).sum::<f64>() / n;
            let var =
                visits.iter().map(|v| (f.value(v) - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            means.push(m);
            // constant column: distances on it are all zero anyway
            sds.push(if var > 0.0 { var.sqrt() } else { 1.0 });
        }
        Standardizer { means, sds }
    }

    pub fn transform(&self, v: &PatientVisit) -> Vec<f64> {
        MATCH_FEATURES
            .iter()
            .enumerate()
            .map(|(j, f)| (f.value(v) - self.means[j]) / self.sds[j])
            .collect()
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// A matched stay/step pair; indices point into the scored pool.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pair {
    pub stay: usize,
    pub step: usize,
    pub distance: f64,
    pub bucket: usize,
}

/// Greedy one-to-one matching inside one bucket: repeatedly take the
/// smallest-distance cross-arm pair among unmatched visits. Ties go to the
/// lower (stay, step) index pair.
pub fn greedy_match(
    stay: &[usize],
    step: &[usize],
    points: &[Vec<f64>],
) -> Vec<(usize, usize, f64)> {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::with_capacity(stay.len() * step.len());
    for &s in stay {
        for &t in step {
            candidates.push((euclidean(&points[s], &points[t]), s, t));
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let target = stay.len().min(step.len());
    let mut used_stay = std::collections::HashSet::with_capacity(target);
    let mut used_step = std::collections::HashSet::with_capacity(target);
    let mut out = Vec::with_capacity(target);
    for (d, s, t) in candidates {
        if out.len() == target {
            break;
        }
        if used_stay.contains(&s) || used_step.contains(&t) {
            continue;
        }
        used_stay.insert(s);
        used_step.insert(t);
        out.push((s, t, d));
    }
    out
}

/// Matches within every bucket independently; unmatched visits of the larger
/// arm in a bucket are dropped. Output is ordered by bucket.
pub fn match_within_buckets(buckets: &Buckets, arms: &[Arm], points: &[Vec<f64>]) -> Vec<Pair> {
    let k = buckets.count();
    let mut members = vec![(Vec::new(), Vec::new()); k];
    for (i, (&b, &a)) in buckets.assignment.iter().zip(arms).enumerate() {
        match a {
            Arm::Stay => members[b].0.push(i),
            Arm::Step => members[b].1.push(i),
        }
    }
    members
        .par_iter()
        .enumerate()
        .map(|(bucket, (stay, step))| {
            greedy_match(stay, step, points)
                .into_iter()
                .map(|(s, t, distance)| Pair {
                    stay: s,
                    step: t,
                    distance,
                    bucket,
                })
                .collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// Keeps the `ceil(keep_fraction * n)` closest pairs. Ties on distance break
/// by bucket index, then by the members' visit ids.
pub fn discard_least_similar(
    pairs: &[Pair],
    visits: &[PatientVisit],
    keep_fraction: f64,
) -> Result<Vec<Pair>, DebiasError> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(DebiasError::InvalidKeepFraction(keep_fraction));
    }
    let keep = ((keep_fraction * pairs.len() as f64).ceil() as usize).min(pairs.len());
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| pair_order(a, b, visits));
    sorted.truncate(keep);
    sorted.sort_by(|a, b| {
        a.bucket
            .cmp(&b.bucket)
            .then_with(|| pair_order(a, b, visits))
    });
    Ok(sorted)
}

fn pair_order(a: &Pair, b: &Pair, visits: &[PatientVisit]) -> Ordering {
    a.distance
        .total_cmp(&b.distance)
        .then(a.bucket.cmp(&b.bucket))
        .then_with(|| visits[a.stay].visit_id.cmp(&visits[b.stay].visit_id))
        .then_with(|| visits[a.step].visit_id.cmp(&visits[b.step].visit_id))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceRow {
    pub name: String,
    pub smd_before: f64,
    pub smd_after: f64,
    /// Pooled standard deviation was zero; the SMD is reported as 0.
    pub degenerate_before: bool,
    pub degenerate_after: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub rows: Vec<BalanceRow>,
}

impl BalanceReport {
    pub fn row(&self, name: &str) -> Option<&BalanceRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

/// Absolute standardized mean difference between arms, with a flag when the
/// pooled standard deviation vanishes.
pub fn smd(values: &[f64], arms: &[Arm]) -> (f64, bool) {
    let moments = |arm: Arm| {
        let xs: Vec<f64> = values
            .iter()
            .zip(arms)
            .filter(|(_, a)| **a == arm)
            .map(|(v, _)| *v)
            .collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        (mean, var)
    };
    let (m1, v1) = moments(Arm::Step);
    let (m0, v0) = moments(Arm::Stay);
    let pooled = ((v1 + v0) / 2.0).sqrt();
    if pooled.is_nan() || pooled <= 0.0 || !m1.is_finite() || !m0.is_finite() {
        return (0.0, true);
    }
    ((m1 - m0).abs() / pooled, false)
}

/// SMD per matching covariate, the contraindication flag and the
/// counterfactual score, before and after matching.
pub fn balance_report(before: &ArmedCohort, after: &ArmedCohort) -> BalanceReport {
    let mut features: Vec<Feature> = MATCH_FEATURES.to_vec();
    features.push(Feature::KidneyContraindication);
    let mut rows: Vec<BalanceRow> = features
        .iter()
        .map(|f| {
            let col = |c: &ArmedCohort| c.visits.iter().map(|v| f.value(v)).collect::<Vec<_>>();
            let (b, db) = smd(&col(before), &before.arms);
            let (a, da) = smd(&col(after), &after.arms);
            BalanceRow {
                name: f.name().to_string(),
                smd_before: b,
                smd_after: a,
                degenerate_before: db,
                degenerate_after: da,
            }
        })
        .collect();
    let (b, db) = smd(&before.scores, &before.arms);
    let (a, da) = smd(&after.scores, &after.arms);
    rows.push(BalanceRow {
        name: "counterfactual_score".into(),
        smd_before: b,
        smd_after: a,
        degenerate_before: db,
        degenerate_after: da,
    });
    BalanceReport { rows }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DebiasConfig {
    pub buckets: usize,
    pub keep_fraction: f64,
}

impl Default for DebiasConfig {
    fn default() -> Self {
        DebiasConfig {
            buckets: 6,
            keep_fraction: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub stay_id: String,
    pub step_id: String,
    pub distance: f64,
    pub bucket: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedDataset {
    pub contrast: Contrast,
    pub bucket_edges: Vec<f64>,
    pub pairs: Vec<MatchedPair>,
    pub discarded: usize,
    /// Pair members, stay then step for each pair in `pairs` order.
    pub retained: ArmedCohort,
    pub diagnostics: BalanceReport,
}

impl MatchedDataset {
    /// Audit export: two rows per pair.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DebiasError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["pair", "bucket", "distance", "arm", "visit_id", "score"])?;
        for (i, p) in self.pairs.iter().enumerate() {
            for j in 0..2 {
                let at = 2 * i + j;
                w.write_record([
                    i.to_string(),
                    p.bucket.to_string(),
                    p.distance.to_string(),
                    self.retained.arms[at].as_str().to_string(),
                    self.retained.visits[at].visit_id.clone(),
                    self.retained.scores[at].to_string(),
                ])?;
            }
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Runs the full emulation for one contrast on a training cohort.
pub fn emulate_trial(
    train: &Cohort,
    contrast: &Contrast,
    cfg: &DebiasConfig,
    params: &ForestParams,
) -> Result<MatchedDataset, DebiasError> {
    let pool = counterfactual_scores(train, contrast, params)?;
    let buckets = bucketize(&pool.scores, cfg.buckets)?;
    let standardizer = Standardizer::fit(&pool.visits);
    let points: Vec<Vec<f64>> = pool
        .visits
        .iter()
        .map(|v| standardizer.transform(v))
        .collect();
    let pairs = match_within_buckets(&buckets, &pool.arms, &points);
    if pairs.is_empty() {
        return Err(DebiasError::NoPairs);
    }
    let kept = discard_least_similar(&pairs, &pool.visits, cfg.keep_fraction)?;

    let mut retained = ArmedCohort::default();
    for p in &kept {
        for i in [p.stay, p.step] {
            retained.visits.push(pool.visits[i].clone());
            retained.arms.push(pool.arms[i]);
            retained.scores.push(pool.scores[i]);
        }
    }
    let diagnostics = balance_report(&pool, &retained);
    Ok(MatchedDataset {
        contrast: *contrast,
        bucket_edges: buckets.edges,
        pairs: kept
            .iter()
            .map(|p| MatchedPair {
                stay_id: pool.visits[p.stay].visit_id.clone(),
                step_id: pool.visits[p.step].visit_id.clone(),
                distance: p.distance,
                bucket: p.bucket,
            })
            .collect(),
        discarded: pairs.len() - kept.len(),
        retained,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::tests::visit;

    #[test]
    fn contrast_validation() {
        assert!(Contrast::new(
            Group::NoMedication,
            Regimen::NoMedication,
            Regimen::InsulinMono
        )
        .is_ok());
        assert!(Contrast::new(
            Group::NoMedication,
            Regimen::NoMedication,
            TreatmentOption::FirstLine
        )
        .is_ok());
        assert!(Contrast::new(
            Group::NoMedication,
            Regimen::OtherHypoMono,
            Regimen::MetforminMono
        )
        .is_ok());
        assert!(Contrast::new(
            Group::NoMedication,
            Regimen::InsulinMono,
            Regimen::NoMedication
        )
        .is_err());
        assert!(Contrast::new(
            Group::MetforminMono,
            Regimen::MetforminMono,
            Regimen::InsulinMono
        )
        .is_err());
        assert!(Contrast::new(
            Group::OtherHypoMono,
            TreatmentOption::FirstLine,
            Regimen::InsulinPlusOther
        )
        .is_err());
    }

    #[test]
    fn equal_width_edges() {
        let b = bucketize(&[6.0, 12.0, 9.5], 6).unwrap();
        assert_eq!(b.edges, vec![6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        assert_eq!(b.assignment, vec![0, 5, 3]);
    }

    #[test]
    fn half_open_buckets() {
        let b = bucketize(&[6.0, 12.0, 9.999_999, 10.0, 7.0], 6).unwrap();
        assert_eq!(b.assignment, vec![0, 5, 3, 4, 1]);
    }

    #[test]
    fn degenerate_range_single_bucket() {
        let b = bucketize(&[7.0, 7.0, 7.0], 6).unwrap();
        assert!(b.degenerate);
        assert_eq!(b.count(), 1);
        assert_eq!(b.assignment, vec![0, 0, 0]);
        assert!(matches!(bucketize(&[], 6), Err(DebiasError::NoScores)));
        assert!(matches!(
            bucketize(&[1.0], 0),
            Err(DebiasError::ZeroBuckets)
        ));
    }

    #[test]
    fn single_pair_bucket() {
        let points = vec![vec![0.0, 0.0], vec![3.0, 4.0]];
        let pairs = greedy_match(&[0], &[1], &points);
        assert_eq!(pairs, vec![(0, 1, 5.0)]);
    }

    #[test]
    fn without_replacement_drops_excess() {
        let points = vec![vec![0.0], vec![2.0], vec![2.0]];
        let buckets = Buckets {
            edges: vec![0.0, 1.0],
            assignment: vec![0, 0, 0],
            degenerate: false,
        };
        let pairs = match_within_buckets(&buckets, &[Arm::Stay, Arm::Step, Arm::Step], &points);
        assert_eq!(pairs.len(), 1);
        assert_eq!(
            (pairs[0].stay, pairs[0].step, pairs[0].distance),
            (0, 1, 2.0)
        );
    }

    fn pair(i: usize, d: f64, bucket: usize) -> Pair {
        Pair {
            stay: 2 * i,
            step: 2 * i + 1,
            distance: d,
            bucket,
        }
    }

    fn ids(n: usize) -> Vec<PatientVisit> {
        (0..n).map(|i| visit(&format!("v{i:03}"))).collect()
    }

    #[test]
    fn keep_all_is_identity_up_to_order() {
        let pairs: Vec<Pair> = (0..5).map(|i| pair(i, i as f64, 0)).collect();
        let kept = discard_least_similar(&pairs, &ids(10), 1.0).unwrap();
        assert_eq!(kept, pairs);
    }

    #[test]
    fn drops_the_farthest() {
        let dists = [0.3, 1.2, 0.1, 5.0, 0.7, 0.9, 2.2, 0.4, 0.8, 1.1];
        let pairs: Vec<Pair> = dists
            .iter()
            .enumerate()
            .map(|(i, &d)| pair(i, d, i % 3))
            .collect();
        let kept = discard_least_similar(&pairs, &ids(20), 0.9).unwrap();
        assert_eq!(kept.len(), 9);
        assert!(kept.iter().all(|p| p.distance != 5.0));
        assert!(matches!(
            discard_least_similar(&pairs, &ids(20), 0.0),
            Err(DebiasError::InvalidKeepFraction(_))
        ));
    }

    #[test]
    fn distance_ties_break_by_bucket_then_id() {
        let pairs = vec![pair(0, 1.0, 2), pair(1, 1.0, 1), pair(2, 0.5, 0)];
        let kept = discard_least_similar(&pairs, &ids(6), 0.6).unwrap();
        assert_eq!(kept.len(), 2);
        assert!(kept.iter().any(|p| p.bucket == 1) && kept.iter().all(|p| p.bucket != 2));
    }

    #[test]
    fn identical_arms_have_zero_smd() {
        let pool = ArmedCohort {
            visits: ids(4),
            arms: vec![Arm::Stay, Arm::Step, Arm::Stay, Arm::Step],
            scores: vec![7.0, 7.0, 8.0, 8.0],
        };
        let report = balance_report(&pool, &pool);
        for row in &report.rows {
            assert_eq!(row.smd_before, 0.0, "{}", row.name);
        }
        // constant covariates are degenerate, the score is not
        assert!(report.row("age").unwrap().degenerate_before);
        assert!(
            !report
                .row("counterfactual_score")
                .unwrap()
                .degenerate_before
        );
    }

    #[test]
    fn smd_value() {
        let (s, deg) = smd(
            &[1.0, 3.0, 2.0, 4.0],
            &[Arm::Stay, Arm::Stay, Arm::Step, Arm::Step],
        );
        // means 2 and 3, both variances 2
        assert!(!deg);
        assert!((s - 1.0 / 2f64.sqrt()).abs() < 1e-15);
    }

    /// Minimum total distance over all maximum-cardinality matchings.
    fn optimal_cost(stay: &[usize], step: &[usize], points: &[Vec<f64>]) -> f64 {
        let (small, large, flip) = if stay.len() <= step.len() {
            (stay, step, false)
        } else {
            (step, stay, true)
        };
        fn go(
            i: usize,
            small: &[usize],
            large: &[usize],
            used: &mut Vec<bool>,
            points: &[Vec<f64>],
            flip: bool,
        ) -> f64 {
            if i == small.len() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..large.len() {
                if used[j] {
                    continue;
                }
                used[j] = true;
                let (a, b) = if flip {
                    (large[j], small[i])
                } else {
                    (small[i], large[j])
                };
                best = best.min(
                    euclidean(&points[a], &points[b]) + go(i + 1, small, large, used, points, flip),
                );
                used[j] = false;
            }
            best
        }
        go(0, small, large, &mut vec![false; large.len()], points, flip)
    }

    #[test]
    fn greedy_close_to_optimal_on_small_buckets() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let ns = rng.random_range(1..=6);
            let nt = rng.random_range(1..=6);
            let points: Vec<Vec<f64>> = (0..ns + nt)
                .map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect();
            let stay: Vec<usize> = (0..ns).collect();
            let step: Vec<usize> = (ns..ns + nt).collect();
            let pairs = greedy_match(&stay, &step, &points);
            assert_eq!(pairs.len(), ns.min(nt));
            let greedy: f64 = pairs.iter().map(|p| p.2).sum();
            let opt = optimal_cost(&stay, &step, &points);
            assert!(greedy >= opt - 1e-12);
            assert!(greedy <= 1.5 * opt + 1e-12, "{greedy} vs {opt}");
        }
    }
}
