//! Synthetic confounded cohorts with known treatment effects.
//!
//! Each visit has a latent severity that raises its HbA1c history and, scaled
//! by `confounding_strength`, pushes the simulated doctor toward aggressive
//! options. True expected reductions are threshold-like functions of observed
//! features, so the optimal policy is learnable by shallow trees while the
//! softmax behavior policy is noisy and therefore suboptimal.
//!
//! Visit `i` draws from ChaCha8 stream `i` of the configured seed. Output is
//! identical however the work is sharded.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{Cohort, PatientVisit};
use crate::preprocess::percentile_sorted;
use crate::regimen::{Group, Regimen, UnknownLabel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n_visits: usize,
    pub seed: u64,
    pub confounding_strength: f64,
    /// Proportions of no-medication, other-hypoglycemic, metformin and
    /// metformin-plus-other current regimens.
    pub group_mix: [f64; 4],
    /// Outcome noise standard deviation, HbA1c percentage points.
    pub noise_sd: f64,
    /// Share of visits whose outcome follows the treatment effect; the rest
    /// simulate non-adherence and record an HbA1c increase.
    pub adherence: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_visits: 20_000,
            seed: 42,
            confounding_strength: 1.0,
            group_mix: [0.35, 0.2, 0.3, 0.15],
            noise_sd: 0.3,
            adherence: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("action {action} is not admissible for visit {visit_id} in group {group}")]
    InadmissibleAction {
        visit_id: String,
        group: Group,
        action: Regimen,
    },
    #[error("visit {0} has no ground truth")]
    UnknownVisit(String),
    #[error("no actions to score")]
    Empty,
    #[error("ground truth row {row}: {detail}")]
    MalformedTruth { row: usize, detail: String },
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.n_visits == 0 {
            return bad("n_visits must be at least 1".into());
        }
        if !(self.confounding_strength.is_finite() && self.confounding_strength >= 0.0) {
            return bad(format!(
                "confounding_strength must be >= 0, got {}",
                self.confounding_strength
            ));
        }
        if self.group_mix.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("group_mix entries must lie in [0, 1]".into());
        }
        let total: f64 = self.group_mix.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("group_mix sums to {total}, expected 1"));
        }
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return bad("noise_sd must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.adherence) {
            return bad("adherence must lie in [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitTruth {
    pub visit_id: String,
    pub group: Group,
    /// True expected reduction per admissible option, in `Group::options` order.
    pub rewards: Vec<(Regimen, f64)>,
    pub optimal_action: Regimen,
    pub behavior_action: Regimen,
}

impl VisitTruth {
    pub fn reward(&self, option: Regimen) -> Option<f64> {
        self.rewards
            .iter()
            .find(|(r, _)| *r == option)
            .map(|&(_, v)| v)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    visits: Vec<VisitTruth>,
    index: HashMap<String, usize>,
}

impl GroundTruth {
    pub fn new(visits: Vec<VisitTruth>) -> GroundTruth {
        let index = visits
            .iter()
            .enumerate()
            .map(|(i, v)| (v.visit_id.clone(), i))
            .collect();
        GroundTruth { visits, index }
    }

    pub fn visits(&self) -> &[VisitTruth] {
        &self.visits
    }

    pub fn get(&self, visit_id: &str) -> Option<&VisitTruth> {
        self.index.get(visit_id).map(|&i| &self.visits[i])
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["visit_id".to_string(), "group".to_string()];
        header.extend(Regimen::ALL.iter().map(|r| r.as_str().to_string()));
        header.push("optimal_action".into());
        header.push("behavior_action".into());
        w.write_record(&header)?;
        for v in &self.visits {
            let mut rec = vec![v.visit_id.clone(), v.group.to_string()];
            rec.extend(
                Regimen::ALL
                    .iter()
                    .map(|&r| v.reward(r).map(|x| x.to_string()).unwrap_or_default()),
            );
            rec.push(v.optimal_action.to_string());
            rec.push(v.behavior_action.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the layout written by `write_csv`.
    pub fn read_csv<R: Read>(reader: R) -> Result<GroundTruth, SynthError> {
        let bad = |row: usize, detail: String| SynthError::MalformedTruth { row, detail };
        let mut r = csv::Reader::from_reader(reader);
        let mut visits = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let row = i + 1;
            let rec = rec.map_err(|e| bad(row, e.to_string()))?;
            if rec.len() != Regimen::ALL.len() + 4 {
                return Err(bad(
                    row,
                    format!(
                        "expected {} columns, got {}",
                        Regimen::ALL.len() + 4,
                        rec.len()
                    ),
                ));
            }
            let label = |k: usize| {
                rec[k]
                    .parse::<Regimen>()
                    .map_err(|e| bad(row, e.to_string()))
            };
            let group: Group = rec[1]
                .parse()
                .map_err(|e: UnknownLabel| bad(row, e.to_string()))?;
            let mut rewards = Vec::new();
            for &option in group.options() {
                let k = 2 + Regimen::ALL
                    .iter()
                    .position(|&r| r == option)
                    .expect("listed");
                let x: f64 = rec[k]
                    .parse()
                    .map_err(|_| bad(row, format!("reward for {option} is `{}`", &rec[k])))?;
                rewards.push((option, x));
            }
            visits.push(VisitTruth {
                visit_id: rec[0].to_string(),
                group,
                rewards,
                optimal_action: label(2 + Regimen::ALL.len())?,
                behavior_action: label(3 + Regimen::ALL.len())?,
            });
        }
        Ok(GroundTruth::new(visits))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
            .map_err(std::io::Error::other)
    }
}

/// Mean over the given visits of (optimal true reduction − chosen true
/// reduction).
pub fn true_regret<'a>(
    actions: impl IntoIterator<Item = (&'a str, Regimen)>,
    gt: &GroundTruth,
) -> Result<f64, SynthError> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (id, action) in actions {
        let truth = gt
            .get(id)
            .ok_or_else(|| SynthError::UnknownVisit(id.to_string()))?;
        let chosen = truth
            .reward(action)
            .ok_or_else(|| SynthError::InadmissibleAction {
                visit_id: id.to_string(),
                group: truth.group,
                action,
            })?;
        let best = truth
            .reward(truth.optimal_action)
            .expect("optimal is admissible");
        total += best - chosen;
        n += 1;
    }
    if n == 0 {
        return Err(SynthError::Empty);
    }
    Ok(total / n as f64)
}

/// Observed features the true effect functions read.
struct Signals {
    hba1c_last: f64,
    hba1c_p25: f64,
    bmi_last: f64,
    bmi_median: f64,
    contraindicated: bool,
}

/// True expected HbA1c reduction of `option` for a visit in `group`.
fn true_reduction(group: Group, option: Regimen, s: &Signals) -> f64 {
    use Regimen::*;
    let x = s.hba1c_last;
    let contra = if s.contraindicated { 1.0 } else { 0.0 };
    let base = 0.15 + 0.2 * (x - 6.5).max(0.0);
    // saturates so that insulin overtakes the best monotherapy at 8.05
    let first_line = (0.6 * (s.hba1c_p25 - 6.013)).min(0.6);
    let gain = match (group, option) {
        (Group::NoMedication, InsulinMono) => 0.85 + 1.2 * (x - 8.05),
        (Group::NoMedication, OtherHypoMono) => first_line,
        (Group::NoMedication, MetforminMono) => {
            let obese = if s.bmi_last >= 37.02 { 0.7 } else { 0.0 };
            let mild = if x < 6.85 { 0.35 } else { 0.0 };
            first_line + 0.25 - 1.2 * contra - obese - mild
        }
        (Group::OtherHypoMono, InsulinPlusOther) => 1.5 * (x - 9.05),
        (Group::OtherHypoMono, MetforminPlusOther) => 0.5 * (x - 7.85) - 1.3 * contra,
        (Group::MetforminMono, MetforminPlusInsulin) => 1.2 * (x - 8.75),
        (Group::MetforminMono, MetforminPlusOther) => {
            0.08 * (s.bmi_median - 24.1) + 0.1 * (x - 7.5)
        }
        (Group::MetforminPlusOther, MetforminInsulinOther) => {
            0.12 * (s.bmi_median - 27.35) + 0.5 * (x - 9.0)
        }
        _ => 0.0,
    };
    // a worse-than-stay option still lowers HbA1c a little
    base + gain.max(-0.6 * base)
}

/// Behavior-policy logits: a prior preference plus a severity pull that
/// grows with the option's aggressiveness.
fn behavior_logit(option: Regimen, severity: f64, kappa: f64) -> f64 {
    use Regimen::*;
    let (prior, pull) = match option {
        NoMedication => (0.0, 0.0),
        OtherHypoMono => (-0.6, 0.5),
        MetforminMono => (-0.2, 0.9),
        MetforminPlusOther => (-0.15, 0.7),
        InsulinMono => (-1.3, 1.45),
        InsulinPlusOther => (-0.7, 1.0),
        MetforminPlusInsulin => (-0.6, 1.0),
        MetforminInsulinOther => (-0.25, 1.0),
    };
    // stay options are relative to the group's current regimen
    prior + kappa * pull * severity
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn round_to(x: f64, places: i32) -> f64 {
    let f = 10f64.powi(places);
    (x * f).round() / f
}

/// p25, median, mean, p75 of four simulated measurements.
fn history_stats(measurements: &mut [f64; 4]) -> [f64; 4] {
    measurements.sort_by(f64::total_cmp);
    let q = |p| round_to(percentile_sorted(measurements, p).expect("non-empty"), 3);
    let mean = round_to(measurements.iter().sum::<f64>() / 4.0, 3);
    [q(0.25), q(0.5), mean, q(0.75)]
}

const GROUP_BASE_HBA1C: [f64; 4] = [8.7, 8.6, 8.5, 8.7];
const RACES: [(&str, f64); 4] = [
    ("white", 0.5),
    ("black", 0.3),
    ("hispanic", 0.12),
    ("asian", 0.08),
];

fn generate_visit(cfg: &GeneratorConfig, i: usize) -> (PatientVisit, VisitTruth) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(i as u64);

    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut group = Group::MetforminPlusOther;
    for (g, p) in Group::ALL.into_iter().zip(cfg.group_mix) {
        acc += p;
        if u < acc {
            group = g;
            break;
        }
    }

    let severity = normal(&mut rng);
    let age = round_to((58.0 + 11.0 * normal(&mut rng)).clamp(16.0, 90.0), 1);
    let sex = if rng.random_bool(0.5) { "F" } else { "M" };
    let r: f64 = rng.random();
    let mut acc = 0.0;
    let mut race = RACES[RACES.len() - 1].0;
    for (name, p) in RACES {
        acc += p;
        if r < acc {
            race = name;
            break;
        }
    }

    let level = GROUP_BASE_HBA1C[group.index()] + 0.9 * severity;
    let clamp_a1c = |v: f64| round_to(v.clamp(4.0, 17.5), 2);
    let mut a1c_hist = [0.0; 4];
    for m in &mut a1c_hist {
        *m = clamp_a1c(level - 0.3 + 0.7 * normal(&mut rng));
    }
    let hba1c_last = clamp_a1c(level + 0.5 * normal(&mut rng));
    let [hba1c_p25, hba1c_median, hba1c_mean, hba1c_p75] = history_stats(&mut a1c_hist);

    let bmi_level = 31.0 + 5.5 * normal(&mut rng) + 0.8 * severity;
    let clamp_bmi = |v: f64| round_to(v.clamp(16.0, 65.0), 1);
    let mut bmi_hist = [0.0; 4];
    for m in &mut bmi_hist {
        *m = clamp_bmi(bmi_level - 0.3 + 1.2 * normal(&mut rng));
    }
    let bmi_last = clamp_bmi(bmi_level + 0.8 * normal(&mut rng));
    let [bmi_p25, bmi_median, bmi_mean, bmi_p75] = history_stats(&mut bmi_hist);

    let p_contra = 1.0 / (1.0 + (2.4 - 0.5 * severity).exp());
    let contraindicated = rng.random_bool(p_contra);

    let signals = Signals {
        hba1c_last,
        hba1c_p25,
        bmi_last,
        bmi_median,
        contraindicated,
    };
    let options = group.options();
    let rewards: Vec<(Regimen, f64)> = options
        .iter()
        .map(|&o| (o, true_reduction(group, o, &signals)))
        .collect();
    let optimal_action = rewards
        .iter()
        .fold(None::<(Regimen, f64)>, |best, &(o, v)| match best {
            Some((_, bv)) if bv >= v => best,
            _ => Some((o, v)),
        })
        .expect("every group has options")
        .0;

    let stay = group.current();
    let logits: Vec<f64> = options
        .iter()
        .map(|&o| {
            if o == stay {
                0.0
            } else {
                behavior_logit(o, severity, cfg.confounding_strength)
            }
        })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let mut pick = rng.random::<f64>() * weights.iter().sum::<f64>();
    let mut behavior_action = options[options.len() - 1];
    for (&o, w) in options.iter().zip(&weights) {
        if pick < *w {
            behavior_action = o;
            break;
        }
        pick -= w;
    }

    let effect = rewards
        .iter()
        .find(|(o, _)| *o == behavior_action)
        .map(|&(_, v)| v)
        .expect("behavior action admissible");
    let noise = cfg.noise_sd * normal(&mut rng);
    let adherent = rng.random_bool(cfg.adherence);
    let after = if adherent {
        hba1c_last - effect - noise
    } else {
        hba1c_last + 0.05 + 0.4 * normal(&mut rng).abs()
    };
    let hba1c_after = round_to(after.clamp(3.5, 19.5), 2);

    let visit_id = format!("v{i:07}");
    let visit = PatientVisit {
        visit_id: visit_id.clone(),
        age,
        sex: sex.to_string(),
        race: race.to_string(),
        kidney_contraindication: contraindicated,
        hba1c_last,
        hba1c_p25,
        hba1c_median,
        hba1c_mean,
        hba1c_p75,
        bmi_last,
        bmi_p25,
        bmi_median,
        bmi_mean,
        bmi_p75,
        current_regimen: stay,
        prescribed_regimen: behavior_action,
        hba1c_after,
    };
    let truth = VisitTruth {
        visit_id,
        group,
        rewards,
        optimal_action,
        behavior_action,
    };
    (visit, truth)
}

pub fn generate(cfg: &GeneratorConfig) -> Result<(Cohort, GroundTruth), SynthError> {
    cfg.validate()?;
    let (visits, truths): (Vec<_>, Vec<_>) = (0..cfg.n_visits)
        .into_par_iter()
        .map(|i| generate_visit(cfg, i))
        .unzip();
    let provenance = format!(
        "synthetic(seed={}, n={}, confounding={})",
        cfg.seed, cfg.n_visits, cfg.confounding_strength
    );
    Ok((Cohort::new(visits, provenance), GroundTruth::new(truths)))
}

/// Mean `hba1c_last` of `step`-prescribed visits minus that of
/// `stay`-prescribed visits within one current-regimen group.
pub fn arm_mean_gap(cohort: &Cohort, group: Group, stay: Regimen, step: Regimen) -> Option<f64> {
    let mean = |arm: Regimen| {
        let xs: Vec<f64> = cohort
            .iter()
            .filter(|v| v.group() == Some(group) && v.prescribed_regimen == arm)
            .map(|v| v.hba1c_last)
            .collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    };
    Some(mean(step)? - mean(stay)?)
}
