//! Ground-truth models (GTMs) and disagreement-set evaluation of pipelines
//! against the prescriptions actually recorded.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{Cohort, PatientVisit};
use crate::forest::{ForestError, ForestModel, ForestParams, VisitEncoder};
use crate::pipeline::{PipelineError, PipelineSet};
use crate::preprocess::median;
use crate::regimen::{Group, Regimen};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("visit {visit_id} is on {current}, which no pipeline serves")]
    UnsupportedGroup { visit_id: String, current: Regimen },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error("malformed GTM document: {0}")]
    Malformed(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GtmConfig {
    pub min_visits: usize,
    pub forest: ForestParams,
}

impl Default for GtmConfig {
    fn default() -> Self {
        GtmConfig {
            min_visits: 30,
            forest: ForestParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gtm {
    pub group: Group,
    pub option: Regimen,
    pub n_train: usize,
    pub encoder: VisitEncoder,
    pub model: ForestModel,
}

impl Gtm {
    pub fn predict(&self, v: &PatientVisit) -> f64 {
        self.model.predict_row(&self.encoder.encode_row(v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsufficientPair {
    pub group: Group,
    pub option: Regimen,
    pub n_train: usize,
}

/// One reduction model per (current group, prescribed option).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct GtmSet {
    pub models: Vec<Gtm>,
    /// Pairs with too few training visits; evaluation is disabled for them.
    pub insufficient: Vec<InsufficientPair>,
}

impl GtmSet {
    pub fn get(&self, group: Group, option: Regimen) -> Option<&Gtm> {
        self.models
            .iter()
            .find(|g| g.group == group && g.option == option)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("GTMs serialize")
    }

    pub fn from_json(text: &str) -> Result<GtmSet, EvalError> {
        serde_json::from_str(text).map_err(|e| EvalError::Malformed(e.to_string()))
    }
}

/// Fits a GTM for every admissible (group, option) pair that has at least
/// `cfg.min_visits` training visits. Pairs are fit in parallel, each with
/// its own seed offset.
pub fn train_gtms(train: &Cohort, cfg: &GtmConfig) -> Result<GtmSet, EvalError> {
    let pairs: Vec<(usize, Group, Regimen)> = Group::ALL
        .iter()
        .flat_map(|&g| g.options().iter().map(move |&o| (g, o)))
        .enumerate()
        .map(|(i, (g, o))| (i, g, o))
        .collect();
    let fitted: Vec<Result<Result<Gtm, InsufficientPair>, ForestError>> = pairs
        .par_iter()
        .map(|&(i, group, option)| {
            let members: Vec<&PatientVisit> = train
                .iter()
                .filter(|v| v.group() == Some(group) && v.prescribed_regimen == option)
                .collect();
            if members.len() < cfg.min_visits.max(1) {
                return Ok(Err(InsufficientPair {
                    group,
                    option,
                    n_train: members.len(),
                }));
            }
            let encoder = VisitEncoder::fit(members.iter().copied());
            let x = encoder.encode(members.iter().copied());
            let y: Vec<f64> = members.iter().map(|v| v.reduction()).collect();
            let params = cfg.forest.with_seed(cfg.forest.seed.wrapping_add(i as u64));
            let model = ForestModel::fit(&x, &y, &params)?;
            Ok(Ok(Gtm {
                group,
                option,
                n_train: members.len(),
                encoder,
                model,
            }))
        })
        .collect();
    let mut set = GtmSet::default();
    for f in fitted {
        match f? {
            Ok(g) => set.models.push(g),
            Err(p) => {
                log::warn!(
                    "GTM {} -> {} has {} training visits; disabled",
                    p.group,
                    p.option,
                    p.n_train
                );
                set.insufficient.push(p);
            }
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DoctorSide {
    /// hba1c_last − hba1c_after as recorded.
    #[default]
    Observed,
    /// GTM prediction for the prescribed option.
    Gtm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct EvalConfig {
    pub doctor_side: DoctorSide,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisagreementRow {
    pub visit_id: String,
    pub group: Group,
    pub prescribed: Regimen,
    pub recommended: Regimen,
    pub pipeline_reduction: f64,
    pub doctor_reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    /// `None` for the pooled row.
    pub group: Option<Group>,
    pub visits: usize,
    pub agreement: usize,
    pub disagreement: usize,
    pub excluded: usize,
    /// Undefined (`None`) when there are no disagreements.
    pub median_pipeline: Option<f64>,
    pub median_doctor: Option<f64>,
    pub difference: Option<f64>,
}

impl GroupSummary {
    fn from_rows(
        group: Option<Group>,
        visits: usize,
        agreement: usize,
        excluded: usize,
        rows: &[&DisagreementRow],
    ) -> Self {
        let p: Vec<f64> = rows.iter().map(|r| r.pipeline_reduction).collect();
        let d: Vec<f64> = rows.iter().map(|r| r.doctor_reduction).collect();
        let median_pipeline = median(&p).ok();
        let median_doctor = median(&d).ok();
        GroupSummary {
            group,
            visits,
            agreement,
            disagreement: rows.len(),
            excluded,
            median_pipeline,
            median_doctor,
            difference: median_pipeline.zip(median_doctor).map(|(a, b)| a - b),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingGtm {
    pub group: Group,
    pub option: Regimen,
    pub visits: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub doctor_side: DoctorSide,
    pub groups: Vec<GroupSummary>,
    pub overall: GroupSummary,
    /// Pairs whose GTM was unavailable, with the number of visits excluded.
    pub missing_gtm: Vec<MissingGtm>,
    pub disagreements: Vec<DisagreementRow>,
}

/// Recommends for every test visit, then compares GTM-predicted reduction
/// under the recommendation with the doctor's on the disagreement set.
pub fn evaluate_pipelines(
    pipelines: &PipelineSet,
    gtms: &GtmSet,
    test: &Cohort,
    cfg: &EvalConfig,
) -> Result<EvaluationReport, EvalError> {
    struct Tally {
        visits: usize,
        agreement: usize,
        excluded: usize,
    }
    let mut tallies: BTreeMap<Group, Tally> = BTreeMap::new();
    let mut missing: BTreeMap<(Group, Regimen), usize> = BTreeMap::new();
    let mut rows = Vec::new();
    for v in test.iter() {
        let group = v.group().ok_or_else(|| EvalError::UnsupportedGroup {
            visit_id: v.visit_id.clone(),
            current: v.current_regimen,
        })?;
        let rec = pipelines.recommend(v)?.regimen;
        let t = tallies.entry(group).or_insert(Tally {
            visits: 0,
            agreement: 0,
            excluded: 0,
        });
        t.visits += 1;
        if rec == v.prescribed_regimen {
            t.agreement += 1;
            continue;
        }
        let Some(model) = gtms.get(group, rec) else {
            t.excluded += 1;
            *missing.entry((group, rec)).or_default() += 1;
            continue;
        };
        let doctor_reduction = match cfg.doctor_side {
            DoctorSide::Observed => v.reduction(),
            DoctorSide::Gtm => match gtms.get(group, v.prescribed_regimen) {
                Some(m) => m.predict(v),
                None => {
                    t.excluded += 1;
                    *missing.entry((group, v.prescribed_regimen)).or_default() += 1;
                    continue;
                }
            },
        };
        rows.push(DisagreementRow {
            visit_id: v.visit_id.clone(),
            group,
            prescribed: v.prescribed_regimen,
            recommended: rec,
            pipeline_reduction: model.predict(v),
            doctor_reduction,
        });
    }
    let groups = tallies
        .iter()
        .map(|(&g, t)| {
            let rs: Vec<&DisagreementRow> = rows.iter().filter(|r| r.group == g).collect();
            GroupSummary::from_rows(Some(g), t.visits, t.agreement, t.excluded, &rs)
        })
        .collect();
    let all: Vec<&DisagreementRow> = rows.iter().collect();
    let overall = GroupSummary::from_rows(
        None,
        test.len(),
        tallies.values().map(|t| t.agreement).sum(),
        tallies.values().map(|t| t.excluded).sum(),
        &all,
    );
    Ok(EvaluationReport {
        doctor_side: cfg.doctor_side,
        groups,
        overall,
        missing_gtm: missing
            .into_iter()
            .map(|((group, option), visits)| MissingGtm {
                group,
                option,
                visits,
            })
            .collect(),
        disagreements: rows,
    })
}

fn cell(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

impl EvaluationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<22} {:>7} {:>7} {:>7} {:>7} {:>10} {:>10} {:>10}",
            "group", "visits", "agree", "disagree", "excl", "pipeline", "doctor", "diff"
        );
        for s in self.groups.iter().chain(std::iter::once(&self.overall)) {
            let name = s.group.map_or("overall", |g| g.as_str());
            let _ = writeln!(
                out,
                "{:<22} {:>7} {:>7} {:>7} {:>7} {:>10} {:>10} {:>10}",
                name,
                s.visits,
                s.agreement,
                s.disagreement,
                s.excluded,
                cell(s.median_pipeline),
                cell(s.median_doctor),
                cell(s.difference)
            );
        }
        for m in &self.missing_gtm {
            let _ = writeln!(
                out,
                "missing GTM {} -> {}: {} visits excluded",
                m.group, m.option, m.visits
            );
        }
        out
    }

    pub fn write_disagreements_csv<W: Write>(&self, writer: W) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "visit_id",
            "group",
            "prescribed",
            "recommended",
            "pipeline_reduction",
            "doctor_reduction",
        ])?;
        for r in &self.disagreements {
            w.write_record([
                r.visit_id.clone(),
                r.group.to_string(),
                r.prescribed.to_string(),
                r.recommended.to_string(),
                r.pipeline_reduction.to_string(),
                r.doctor_reduction.to_string(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::tests::visit;
    use crate::pipeline::reference_pipelines;

    fn small_params() -> GtmConfig {
        GtmConfig {
            min_visits: 30,
            forest: ForestParams {
                tree_count: 10,
                ..ForestParams::default()
            },
        }
    }

    fn insulin_visits(n: usize, reduction: f64) -> Vec<PatientVisit> {
        (0..n)
            .map(|i| {
                let mut v = visit(&format!("i{i:03}"));
                v.hba1c_last = 8.0 + (i % 7) as f64 * 0.2;
                v.hba1c_after = v.hba1c_last - reduction;
                v.prescribed_regimen = Regimen::InsulinMono;
                v
            })
            .collect()
    }

    #[test]
    fn coverage_bookkeeping() {
        let c = Cohort::new(insulin_visits(40, 1.0), "t");
        let gtms = train_gtms(&c, &small_params()).unwrap();
        assert_eq!(gtms.models.len(), 1);
        assert_eq!(gtms.insufficient.len(), 11);
        let g = gtms.get(Group::NoMedication, Regimen::InsulinMono).unwrap();
        for v in c.iter() {
            assert!((g.predict(v) - 1.0).abs() < 1e-9);
        }
        let back = GtmSet::from_json(&gtms.to_json()).unwrap();
        assert_eq!(back, gtms);
    }

    #[test]
    fn agreement_only_has_undefined_medians() {
        let mut v = visit("a");
        v.hba1c_last = 7.5;
        v.hba1c_p25 = 5.8;
        let report = evaluate_pipelines(
            &reference_pipelines(),
            &GtmSet::default(),
            &Cohort::new(vec![v], "t"),
            &EvalConfig::default(),
        )
        .unwrap();
        assert_eq!(report.overall.agreement, 1);
        assert_eq!(report.overall.disagreement, 0);
        assert_eq!(report.overall.median_pipeline, None);
        assert_eq!(report.overall.difference, None);
    }

    #[test]
    fn singleton_disagreement() {
        let gtms = train_gtms(&Cohort::new(insulin_visits(40, 1.2), "t"), &small_params()).unwrap();
        let mut v = visit("d");
        v.hba1c_last = 9.0;
        v.hba1c_after = 8.2;
        let report = evaluate_pipelines(
            &reference_pipelines(),
            &gtms,
            &Cohort::new(vec![v], "t"),
            &EvalConfig::default(),
        )
        .unwrap();
        let s = &report.overall;
        assert_eq!(s.disagreement, 1);
        assert!((s.median_pipeline.unwrap() - 1.2).abs() < 1e-9);
        assert!((s.median_doctor.unwrap() - 0.8).abs() < 1e-9);
        assert!((s.difference.unwrap() - 0.4).abs() < 1e-9);
        assert!(report.to_table().contains("overall"));
        let mut buf = Vec::new();
        report.write_disagreements_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 2);
    }

    #[test]
    fn missing_gtm_excludes_and_counts() {
        let mut a = visit("a");
        a.hba1c_last = 9.0;
        let mut b = visit("b");
        b.hba1c_last = 7.5;
        b.hba1c_p25 = 5.8;
        let report = evaluate_pipelines(
            &reference_pipelines(),
            &GtmSet::default(),
            &Cohort::new(vec![a, b], "t"),
            &EvalConfig::default(),
        )
        .unwrap();
        let g = &report.groups[0];
        assert_eq!((g.agreement, g.disagreement, g.excluded), (1, 0, 1));
        assert_eq!(g.agreement + g.disagreement + g.excluded, g.visits);
        assert_eq!(
            report.missing_gtm,
            vec![MissingGtm {
                group: Group::NoMedication,
                option: Regimen::InsulinMono,
                visits: 1
            }]
        );
    }

    #[test]
    fn unsupported_group_is_an_error() {
        let mut v = visit("u");
        v.current_regimen = Regimen::InsulinMono;
        let r = evaluate_pipelines(
            &reference_pipelines(),
            &GtmSet::default(),
            &Cohort::new(vec![v], "t"),
            &EvalConfig::default(),
        );
        assert!(matches!(r, Err(EvalError::UnsupportedGroup { .. })));
    }
}
