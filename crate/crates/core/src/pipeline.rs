//! Per-group decision pipelines: ordered policy trees evaluated
//! aggressive-first, falling through to "stay on the current regimen".

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{Feature, PatientVisit};
use crate::policytree::{Decision, PolicyNode, PolicyTree};
use crate::regimen::{Group, Regimen, TreatmentOption};

pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Error, PartialEq)]
pub enum PipelineError {
    #[error("{group}: stage {stage} steps to {step} after a stage that steps to {previous}; stages must get strictly less aggressive")]
    OrderingViolation {
        group: Group,
        stage: String,
        step: TreatmentOption,
        previous: TreatmentOption,
    },
    #[error("{group}: stage {stage} is not admissible: {detail}")]
    InadmissibleStage {
        group: Group,
        stage: String,
        detail: String,
    },
    #[error("visit {visit_id} is on {current}, pipeline serves {group}")]
    GroupMismatch {
        visit_id: String,
        current: Regimen,
        group: Group,
    },
    #[error("no pipeline for group {0}")]
    UnknownGroup(Group),
    #[error("schema version {found:?} is not supported (expected {expected:?})")]
    SchemaVersionMismatch { found: String, expected: String },
    #[error("malformed pipeline document: {0}")]
    MalformedDocument(String),
}

/// One pipeline stage. `FirstLine` is the two-level stage whose router
/// decides whether to start first-line therapy and whose chooser picks the
/// monotherapy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Stage {
    Step {
        tree: PolicyTree,
    },
    FirstLine {
        router: PolicyTree,
        chooser: PolicyTree,
    },
}

impl Stage {
    pub fn name(&self) -> &str {
        match self {
            Stage::Step { tree } => &tree.name,
            Stage::FirstLine { router, .. } => &router.name,
        }
    }

    pub fn step(&self) -> TreatmentOption {
        match self {
            Stage::Step { tree } => tree.step,
            Stage::FirstLine { router, .. } => router.step,
        }
    }

    pub fn trees(&self) -> Vec<&PolicyTree> {
        match self {
            Stage::Step { tree } => vec![tree],
            Stage::FirstLine { router, chooser } => vec![router, chooser],
        }
    }

    fn check(&self, group: Group) -> Result<(), PipelineError> {
        let bad = |detail: String| PipelineError::InadmissibleStage {
            group,
            stage: self.name().to_string(),
            detail,
        };
        for t in self.trees() {
            t.validate().map_err(|e| bad(e.to_string()))?;
        }
        let stay = TreatmentOption::Regimen(group.current());
        match self {
            Stage::Step { tree } => {
                if tree.stay != stay {
                    return Err(bad(format!(
                        "stay option {} is not {}",
                        tree.stay,
                        group.current()
                    )));
                }
                match tree.step {
                    TreatmentOption::Regimen(r) if r != group.current() && group.admits(r) => {
                        Ok(())
                    }
                    other => Err(bad(format!(
                        "step {other} is not an escalation available to the group"
                    ))),
                }
            }
            Stage::FirstLine { router, chooser } => {
                if group != Group::NoMedication {
                    return Err(bad(
                        "first-line routing only applies to untreated patients".into()
                    ));
                }
                if router.stay != stay || router.step != TreatmentOption::FirstLine {
                    return Err(bad(format!(
                        "router must choose between {stay} and first_line"
                    )));
                }
                let mut opts = [chooser.stay, chooser.step];
                opts.sort();
                let mut want = [
                    TreatmentOption::Regimen(Regimen::MetforminMono),
                    TreatmentOption::Regimen(Regimen::OtherHypoMono),
                ];
                want.sort();
                if opts != want {
                    return Err(bad(
                        "chooser must pick between metformin_mono and other_hypo_mono".into(),
                    ));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pipeline {
    pub group: Group,
    pub stages: Vec<Stage>,
}

/// Validates stage admissibility and the aggressive-first ordering.
pub fn compose(group: Group, stages: Vec<Stage>) -> Result<Pipeline, PipelineError> {
    let mut previous: Option<TreatmentOption> = None;
    for stage in &stages {
        stage.check(group)?;
        if let Some(prev) = previous {
            if stage.step().aggressiveness() >= prev.aggressiveness() {
                return Err(PipelineError::OrderingViolation {
                    group,
                    stage: stage.name().to_string(),
                    step: stage.step(),
                    previous: prev,
                });
            }
        }
        previous = Some(stage.step());
    }
    Ok(Pipeline { group, stages })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub stage: String,
    pub decisions: Vec<Decision>,
    pub outcome: TreatmentOption,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub group: Group,
    pub stages: Vec<StageTrace>,
    pub recommendation: Regimen,
}

impl Trace {
    /// Re-walks the pipeline along the recorded branches. Returns the
    /// recommendation reached, or `None` if the trace does not fit.
    pub fn replay(&self, p: &Pipeline) -> Option<Regimen> {
        if self.group != p.group {
            return None;
        }
        let mut recorded = self.stages.iter();
        let mut follow = |tree: &PolicyTree| -> Option<TreatmentOption> {
            let st = recorded.next()?;
            if st.stage != tree.name {
                return None;
            }
            let out = tree.replay(&st.decisions)?;
            (out == st.outcome).then_some(out)
        };
        let mut result = p.group.current();
        for stage in &p.stages {
            match stage {
                Stage::Step { tree } => {
                    if follow(tree)? == tree.step {
                        result = tree.step.regimens()[0];
                        break;
                    }
                }
                Stage::FirstLine { router, chooser } => {
                    if follow(router)? == router.step {
                        result = follow(chooser)?.regimens()[0];
                        break;
                    }
                }
            }
        }
        if recorded.next().is_some() {
            return None;
        }
        Some(result)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub regimen: Regimen,
    pub trace: Trace,
}

fn run(tree: &PolicyTree, v: &PatientVisit, stages: &mut Vec<StageTrace>) -> TreatmentOption {
    let (outcome, decisions) = tree.decide(v);
    stages.push(StageTrace {
        stage: tree.name.clone(),
        decisions,
        outcome,
    });
    outcome
}

fn single(option: TreatmentOption) -> Regimen {
    match option {
        TreatmentOption::Regimen(r) => r,
        TreatmentOption::FirstLine => unreachable!("first_line is resolved by the chooser"),
    }
}

pub fn recommend(p: &Pipeline, v: &PatientVisit) -> Result<Recommendation, PipelineError> {
    if v.group() != Some(p.group) {
        return Err(PipelineError::GroupMismatch {
            visit_id: v.visit_id.clone(),
            current: v.current_regimen,
            group: p.group,
        });
    }
    let mut stages = Vec::new();
    let mut regimen = p.group.current();
    for stage in &p.stages {
        match stage {
            Stage::Step { tree } => {
                if run(tree, v, &mut stages) == tree.step {
                    regimen = single(tree.step);
                    break;
                }
            }
            Stage::FirstLine { router, chooser } => {
                if run(router, v, &mut stages) == router.step {
                    regimen = single(run(chooser, v, &mut stages));
                    break;
                }
            }
        }
    }
    Ok(Recommendation {
        regimen,
        trace: Trace {
            group: p.group,
            stages,
            recommendation: regimen,
        },
    })
}

impl Pipeline {
    pub fn tree_count(&self) -> usize {
        self.stages.iter().map(|s| s.trees().len()).sum()
    }

    pub fn trees(&self) -> Vec<&PolicyTree> {
        self.stages.iter().flat_map(|s| s.trees()).collect()
    }

    pub fn recommend(&self, v: &PatientVisit) -> Result<Recommendation, PipelineError> {
        recommend(self, v)
    }

    /// Every regimen the pipeline can emit, stay included.
    pub fn reachable(&self) -> Vec<Regimen> {
        let mut out = vec![self.group.current()];
        for s in &self.stages {
            match s {
                Stage::Step { tree } => out.extend(tree.step.regimens()),
                Stage::FirstLine { chooser, .. } => {
                    out.extend(chooser.stay.regimens());
                    out.extend(chooser.step.regimens());
                }
            }
        }
        out.sort();
        out.dedup();
        out
    }
}

/// One pipeline per supported group.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PipelineSet {
    pub pipelines: BTreeMap<Group, Pipeline>,
}

#[derive(Serialize, Deserialize)]
struct Document {
    schema_version: String,
    pipelines: Vec<Pipeline>,
}

impl PipelineSet {
    pub fn new(pipelines: impl IntoIterator<Item = Pipeline>) -> PipelineSet {
        PipelineSet {
            pipelines: pipelines.into_iter().map(|p| (p.group, p)).collect(),
        }
    }

    pub fn get(&self, group: Group) -> Option<&Pipeline> {
        self.pipelines.get(&group)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Pipeline> {
        self.pipelines.values()
    }

    pub fn len(&self) -> usize {
        self.pipelines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pipelines.is_empty()
    }

    /// Dispatches on the visit's current regimen.
    pub fn recommend(&self, v: &PatientVisit) -> Result<Recommendation, PipelineError> {
        let group = v.group().ok_or_else(|| PipelineError::GroupMismatch {
            visit_id: v.visit_id.clone(),
            current: v.current_regimen,
            group: Group::NoMedication,
        })?;
        self.get(group)
            .ok_or(PipelineError::UnknownGroup(group))?
            .recommend(v)
    }

    pub fn export_json(&self) -> String {
        let doc = Document {
            schema_version: SCHEMA_VERSION.to_string(),
            pipelines: self.pipelines.values().cloned().collect(),
        };
        serde_json::to_string_pretty(&doc).expect("pipelines serialize")
    }

    /// Parses and re-validates a pipeline document.
    pub fn import_json(text: &str) -> Result<PipelineSet, PipelineError> {
        let malformed = |e: String| PipelineError::MalformedDocument(e);
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
        let found = value
            .get("schema_version")
            .and_then(|v| v.as_str())
            .ok_or_else(|| malformed("missing string field schema_version".into()))?;
        if found != SCHEMA_VERSION {
            return Err(PipelineError::SchemaVersionMismatch {
                found: found.to_string(),
                expected: SCHEMA_VERSION.to_string(),
            });
        }
        let doc: Document = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
        let mut set = PipelineSet::default();
        for p in doc.pipelines {
            if set.pipelines.contains_key(&p.group) {
                return Err(malformed(format!("duplicate pipeline for {}", p.group)));
            }
            let p = compose(p.group, p.stages)?;
            set.pipelines.insert(p.group, p);
        }
        Ok(set)
    }
}

fn leaf(action: impl Into<TreatmentOption>) -> PolicyNode {
    PolicyNode::Leaf {
        action: action.into(),
    }
}

fn threshold_tree(
    name: &str,
    current: Regimen,
    step: Regimen,
    feature: Feature,
    threshold: f64,
) -> PolicyTree {
    PolicyTree {
        name: name.into(),
        stay: current.into(),
        step: step.into(),
        nodes: vec![
            PolicyNode::Split {
                feature,
                threshold,
                left: 1,
                right: 2,
            },
            leaf(current),
            leaf(step),
        ],
    }
}

/// The four reference pipelines, built by hand.
pub fn reference_pipelines() -> PipelineSet {
    use Feature::*;
    use Regimen::*;

    let router = PolicyTree {
        name: "1b".into(),
        stay: NoMedication.into(),
        step: TreatmentOption::FirstLine,
        nodes: vec![
            PolicyNode::Split {
                feature: Hba1cP25,
                threshold: 6.013,
                left: 1,
                right: 2,
            },
            leaf(NoMedication),
            leaf(TreatmentOption::FirstLine),
        ],
    };
    let chooser = PolicyTree {
        name: "1c".into(),
        stay: OtherHypoMono.into(),
        step: MetforminMono.into(),
        nodes: vec![
            PolicyNode::Flag {
                feature: KidneyContraindication,
                left: 1,
                right: 6,
            },
            PolicyNode::Split {
                feature: BmiLast,
                threshold: 37.02,
                left: 2,
                right: 5,
            },
            PolicyNode::Split {
                feature: Hba1cLast,
                threshold: 6.85,
                left: 3,
                right: 4,
            },
            leaf(OtherHypoMono),
            leaf(MetforminMono),
            leaf(OtherHypoMono),
            leaf(OtherHypoMono),
        ],
    };
    let metformin_plus_other = PolicyTree {
        name: "2b".into(),
        stay: OtherHypoMono.into(),
        step: MetforminPlusOther.into(),
        nodes: vec![
            PolicyNode::Flag {
                feature: KidneyContraindication,
                left: 1,
                right: 4,
            },
            PolicyNode::Split {
                feature: Hba1cLast,
                threshold: 7.85,
                left: 2,
                right: 3,
            },
            leaf(OtherHypoMono),
            leaf(MetforminPlusOther),
            leaf(OtherHypoMono),
        ],
    };

    let pipelines = [
        compose(
            Group::NoMedication,
            vec![
                Stage::Step {
                    tree: threshold_tree("1a", NoMedication, InsulinMono, Hba1cLast, 8.05),
                },
                Stage::FirstLine { router, chooser },
            ],
        ),
        compose(
            Group::OtherHypoMono,
            vec![
                Stage::Step {
                    tree: threshold_tree("2a", OtherHypoMono, InsulinPlusOther, Hba1cLast, 9.05),
                },
                Stage::Step {
                    tree: metformin_plus_other,
                },
            ],
        ),
        compose(
            Group::MetforminMono,
            vec![
                Stage::Step {
                    tree: threshold_tree(
                        "3a",
                        MetforminMono,
                        MetforminPlusInsulin,
                        Hba1cLast,
                        8.75,
                    ),
                },
                Stage::Step {
                    tree: threshold_tree("3b", MetforminMono, MetforminPlusOther, BmiMedian, 24.12),
                },
            ],
        ),
        compose(
            Group::MetforminPlusOther,
            vec![Stage::Step {
                tree: threshold_tree(
                    "4a",
                    MetforminPlusOther,
                    MetforminInsulinOther,
                    BmiMedian,
                    27.35,
                ),
            }],
        ),
    ];
    PipelineSet::new(
        pipelines
            .into_iter()
            .map(|p| p.expect("reference pipelines are valid")),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::tests::visit;
    use Regimen::*;

    fn at(current: Regimen, edit: impl FnOnce(&mut PatientVisit)) -> PatientVisit {
        let mut v = visit("x");
        v.current_regimen = current;
        // neutral values that sit on the stay side of every reference tree
        v.hba1c_last = 7.5;
        v.hba1c_p25 = 5.8;
        v.hba1c_median = 6.5;
        v.bmi_median = 23.0;
        v.bmi_p25 = 22.0;
        v.kidney_contraindication = false;
        edit(&mut v);
        v
    }

    fn fixture() -> Vec<(PatientVisit, Regimen)> {
        vec![
            (at(NoMedication, |v| v.hba1c_last = 9.0), InsulinMono),
            (at(NoMedication, |_| {}), NoMedication),
            (
                at(NoMedication, |v| {
                    v.hba1c_p25 = 6.5;
                    v.bmi_last = 30.0;
                }),
                MetforminMono,
            ),
            (
                at(NoMedication, |v| {
                    v.hba1c_p25 = 6.5;
                    v.kidney_contraindication = true;
                }),
                OtherHypoMono,
            ),
            (at(OtherHypoMono, |v| v.hba1c_last = 9.5), InsulinPlusOther),
            (
                at(OtherHypoMono, |v| v.hba1c_last = 8.2),
                MetforminPlusOther,
            ),
            (
                at(MetforminMono, |v| v.hba1c_last = 8.8),
                MetforminPlusInsulin,
            ),
            (at(MetforminMono, |v| v.hba1c_last = 8.0), MetforminMono),
            (
                at(MetforminPlusOther, |v| v.bmi_median = 28.0),
                MetforminInsulinOther,
            ),
        ]
    }

    #[test]
    fn reference_fixture() {
        let set = reference_pipelines();
        for (v, want) in fixture() {
            let rec = set.recommend(&v).unwrap();
            assert_eq!(rec.regimen, want, "{v:?}");
            let p = set.get(v.group().unwrap()).unwrap();
            assert_eq!(rec.trace.replay(p), Some(want));
        }
    }

    #[test]
    fn shape_of_reference_set() {
        let set = reference_pipelines();
        assert_eq!(set.len(), 4);
        let counts: Vec<usize> = set.iter().map(|p| p.tree_count()).collect();
        assert_eq!(counts, [3, 2, 2, 1]);
    }

    #[test]
    fn short_circuit_hides_later_stages() {
        let set = reference_pipelines();
        let rec = set
            .recommend(&at(NoMedication, |v| v.hba1c_last = 9.0))
            .unwrap();
        assert_eq!(rec.trace.stages.len(), 1);
        assert_eq!(rec.trace.stages[0].stage, "1a");
    }

    #[test]
    fn first_line_routes_into_chooser() {
        let set = reference_pipelines();
        let rec = set
            .recommend(&at(NoMedication, |v| {
                v.hba1c_p25 = 6.5;
                v.bmi_last = 40.0;
            }))
            .unwrap();
        let names: Vec<&str> = rec.trace.stages.iter().map(|s| s.stage.as_str()).collect();
        assert_eq!(names, ["1a", "1b", "1c"]);
        assert_eq!(rec.regimen, OtherHypoMono);
    }

    #[test]
    fn ordering_and_admissibility() {
        let set = reference_pipelines();
        let nomed = set.get(Group::NoMedication).unwrap();
        let mut reversed = nomed.stages.clone();
        reversed.reverse();
        assert!(matches!(
            compose(Group::NoMedication, reversed),
            Err(PipelineError::OrderingViolation { .. })
        ));
        let other = set.get(Group::OtherHypoMono).unwrap().stages.clone();
        assert!(matches!(
            compose(Group::MetforminMono, other),
            Err(PipelineError::InadmissibleStage { .. })
        ));
        let met_other = set.get(Group::MetforminPlusOther).unwrap();
        assert_eq!(
            compose(Group::MetforminPlusOther, met_other.stages.clone()).unwrap(),
            *met_other
        );
    }

    #[test]
    fn group_mismatch() {
        let set = reference_pipelines();
        let p = set.get(Group::MetforminMono).unwrap();
        let v = at(NoMedication, |_| {});
        assert!(matches!(
            recommend(p, &v),
            Err(PipelineError::GroupMismatch { .. })
        ));
        let unsupported = at(InsulinMono, |_| {});
        assert!(set.recommend(&unsupported).is_err());
    }

    #[test]
    fn json_round_trip_and_errors() {
        let set = reference_pipelines();
        let text = set.export_json();
        let back = PipelineSet::import_json(&text).unwrap();
        assert_eq!(back, set);
        for (v, want) in fixture() {
            assert_eq!(back.recommend(&v).unwrap().regimen, want);
        }
        assert!(matches!(
            PipelineSet::import_json(&text[..text.len() / 2]),
            Err(PipelineError::MalformedDocument(_))
        ));
        let bumped = text.replacen(
            "\"schema_version\": \"1\"",
            "\"schema_version\": \"999\"",
            1,
        );
        assert!(matches!(
            PipelineSet::import_json(&bumped),
            Err(PipelineError::SchemaVersionMismatch { .. })
        ));
    }

    #[test]
    fn trace_replay_rejects_tampering() {
        let set = reference_pipelines();
        let v = at(OtherHypoMono, |v| v.hba1c_last = 8.2);
        let rec = set.recommend(&v).unwrap();
        let p = set.get(Group::OtherHypoMono).unwrap();
        let mut t = rec.trace.clone();
        t.stages.pop();
        assert_eq!(t.replay(p), None);
        let mut t = rec.trace;
        t.stages[0].stage = "zz".into();
        assert_eq!(t.replay(p), None);
    }
}
