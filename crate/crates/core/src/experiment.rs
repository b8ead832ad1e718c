//! End-to-end run: inclusion filter, grouping, split, one emulated trial and
//! policy tree per contrast, pipeline composition, GTM evaluation and (on
//! synthetic data) true regret.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{group_by_current, inclusion_filter, Cohort};
use crate::debias::{
    emulate_trial, BalanceReport, Contrast, DebiasConfig, DebiasError, MatchedDataset,
};
use crate::evaluate::{
    evaluate_pipelines, train_gtms, EvalConfig, EvalError, EvaluationReport, GtmConfig, GtmSet,
};
use crate::forest::ForestParams;
use crate::pipeline::{compose, PipelineError, PipelineSet, Stage};
use crate::policytree::{
    estimate_rewards, objective, train_tree, ClassWeighting, PolicyError, PolicyTree, TreeConfig,
};
use crate::preprocess::{model_dataset, remove_outliers_p95, split, PreprocessError};
use crate::regimen::{Group, Regimen, TreatmentOption};
use crate::synthgen::{true_regret, GeneratorConfig, GroundTruth, SynthError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("group {0} has no included visits")]
    EmptyGroup(Group),
    #[error("{stage}: {source}")]
    Preprocess {
        stage: String,
        #[source]
        source: PreprocessError,
    },
    #[error("tree {tree}: {source}")]
    Debias {
        tree: String,
        #[source]
        source: DebiasError,
    },
    #[error("tree {tree}: {source}")]
    Policy {
        tree: String,
        #[source]
        source: PolicyError,
    },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

/// A contrast trained into one policy tree.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeSpec {
    pub name: &'static str,
    pub contrast: Contrast,
}

/// The eight contrasts, grouped and ordered as the pipelines use them.
pub fn tree_specs() -> Vec<TreeSpec> {
    use Regimen::*;
    let c = |g, s: Regimen, t: TreatmentOption| Contrast::new(g, s, t).expect("valid contrast");
    let r = TreatmentOption::Regimen;
    vec![
        TreeSpec {
            name: "1a",
            contrast: c(Group::NoMedication, NoMedication, r(InsulinMono)),
        },
        TreeSpec {
            name: "1b",
            contrast: c(
                Group::NoMedication,
                NoMedication,
                TreatmentOption::FirstLine,
            ),
        },
        TreeSpec {
            name: "1c",
            contrast: c(Group::NoMedication, OtherHypoMono, r(MetforminMono)),
        },
        TreeSpec {
            name: "2a",
            contrast: c(Group::OtherHypoMono, OtherHypoMono, r(InsulinPlusOther)),
        },
        TreeSpec {
            name: "2b",
            contrast: c(Group::OtherHypoMono, OtherHypoMono, r(MetforminPlusOther)),
        },
        TreeSpec {
            name: "3a",
            contrast: c(Group::MetforminMono, MetforminMono, r(MetforminPlusInsulin)),
        },
        TreeSpec {
            name: "3b",
            contrast: c(Group::MetforminMono, MetforminMono, r(MetforminPlusOther)),
        },
        TreeSpec {
            name: "4a",
            contrast: c(
                Group::MetforminPlusOther,
                MetforminPlusOther,
                r(MetforminInsulinOther),
            ),
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub alpha: f64,
    pub weighting: ClassWeighting,
    pub min_leaf: usize,
    pub depths: BTreeMap<String, usize>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        let depths = [
            ("1a", 1),
            ("1b", 1),
            ("1c", 3),
            ("2a", 1),
            ("2b", 2),
            ("3a", 1),
            ("3b", 1),
            ("4a", 1),
        ]
        .into_iter()
        .map(|(k, d)| (k.to_string(), d))
        .collect();
        PolicyConfig {
            alpha: 2.0,
            weighting: ClassWeighting::SampleWeight,
            min_leaf: 20,
            depths,
        }
    }
}

impl PolicyConfig {
    pub fn tree_config(&self, name: &str) -> TreeConfig {
        TreeConfig {
            alpha: self.alpha,
            weighting: self.weighting,
            max_depth: self.depths.get(name).copied().unwrap_or(2),
            min_leaf: self.min_leaf,
            ..TreeConfig::default()
        }
    }
}

/// Every seed used by a run derives from `seed`; the `seed` fields inside
/// `forest` and `gtm.forest` are overridden.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub forest: ForestParams,
    pub debias: DebiasConfig,
    pub policy: PolicyConfig,
    pub gtm: GtmConfig,
    pub evaluation: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            generator: GeneratorConfig::default(),
            forest: ForestParams::default(),
            debias: DebiasConfig::default(),
            policy: PolicyConfig::default(),
            gtm: GtmConfig::default(),
            evaluation: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    fn split_seed(&self, g: Group) -> u64 {
        self.seed.wrapping_add(g.index() as u64)
    }

    fn tree_seed(&self, k: usize) -> u64 {
        self.seed
            .wrapping_mul(1_000_003)
            .wrapping_add(100 + 10 * k as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeReport {
    pub name: String,
    pub contrast: Contrast,
    pub model_rows: usize,
    pub rows_after_outliers: usize,
    pub pairs: usize,
    pub discarded_pairs: usize,
    pub depth: usize,
    pub objective: f64,
    pub balance: BalanceReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretRow {
    pub group: Option<Group>,
    pub visits: usize,
    pub pipeline: f64,
    pub behavior: f64,
}

#[derive(Debug, Clone)]
pub struct GroupSplit {
    pub train: Cohort,
    pub test: Cohort,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub included: usize,
    pub unsupported: usize,
    pub splits: BTreeMap<Group, GroupSplit>,
    pub matched: BTreeMap<String, MatchedDataset>,
    pub trees: Vec<TreeReport>,
    pub pipelines: PipelineSet,
    pub gtms: GtmSet,
    pub report: EvaluationReport,
    /// Present when ground truth was supplied; last row is pooled.
    pub regret: Option<Vec<RegretRow>>,
}

impl ExperimentOutput {
    pub fn test_cohort(&self) -> Cohort {
        concat(self.splits.values().map(|s| &s.test))
    }

    pub fn train_cohort(&self) -> Cohort {
        concat(self.splits.values().map(|s| &s.train))
    }

    pub fn tree_reports_json(&self) -> String {
        serde_json::to_string_pretty(&self.trees).expect("tree reports serialize")
    }
}

fn concat<'a>(parts: impl Iterator<Item = &'a Cohort>) -> Cohort {
    let mut visits = Vec::new();
    let mut provenance = String::new();
    for c in parts {
        provenance.clone_from(&c.provenance);
        visits.extend(c.visits.iter().cloned());
    }
    Cohort::new(visits, provenance)
}

struct Trained {
    tree: PolicyTree,
    matched: MatchedDataset,
    report: TreeReport,
}

fn train_one(
    k: usize,
    spec: &TreeSpec,
    train: &Cohort,
    cfg: &ExperimentConfig,
) -> Result<Trained, ExperimentError> {
    let name = spec.name.to_string();
    let dataset = model_dataset(train, &spec.contrast.targets());
    let clean = remove_outliers_p95(&dataset);
    let forest = cfg.forest.with_seed(cfg.tree_seed(k));
    let matched =
        emulate_trial(&clean, &spec.contrast, &cfg.debias, &forest).map_err(|source| {
            ExperimentError::Debias {
                tree: name.clone(),
                source,
            }
        })?;
    let policy_err = |source| ExperimentError::Policy {
        tree: name.clone(),
        source,
    };
    let rewards =
        estimate_rewards(&matched, &forest.with_seed(cfg.tree_seed(k) + 1)).map_err(policy_err)?;
    let tcfg = cfg.policy.tree_config(spec.name);
    let tree = train_tree(&rewards, spec.name, &tcfg).map_err(policy_err)?;
    log::info!(
        "tree {name}: {} model rows, {} pairs, depth {}",
        dataset.len(),
        matched.pairs.len(),
        tree.depth()
    );
    let report = TreeReport {
        name,
        contrast: spec.contrast,
        model_rows: dataset.len(),
        rows_after_outliers: clean.len(),
        pairs: matched.pairs.len(),
        discarded_pairs: matched.discarded,
        depth: tree.depth(),
        objective: objective(&tree, &rewards, &tcfg),
        balance: matched.diagnostics.clone(),
    };
    Ok(Trained {
        tree,
        matched,
        report,
    })
}

/// Assembles the trained trees into the four group pipelines.
pub fn assemble(trees: &BTreeMap<String, PolicyTree>) -> Result<PipelineSet, PipelineError> {
    let t = |n: &str| trees[n].clone();
    let step = |n: &str| Stage::Step { tree: t(n) };
    Ok(PipelineSet::new([
        compose(
            Group::NoMedication,
            vec![
                step("1a"),
                Stage::FirstLine {
                    router: t("1b"),
                    chooser: t("1c"),
                },
            ],
        )?,
        compose(Group::OtherHypoMono, vec![step("2a"), step("2b")])?,
        compose(Group::MetforminMono, vec![step("3a"), step("3b")])?,
        compose(Group::MetforminPlusOther, vec![step("4a")])?,
    ]))
}

/// Mean true regret of the pipelines and of the recorded prescriptions on
/// the test visits, per group and pooled.
pub fn regret_rows(
    pipelines: &PipelineSet,
    test: &Cohort,
    truth: &GroundTruth,
) -> Result<Vec<RegretRow>, ExperimentError> {
    let mut recs = Vec::with_capacity(test.len());
    for v in test.iter() {
        recs.push((v, pipelines.recommend(v)?.regimen));
    }
    let row = |group: Option<Group>| -> Result<RegretRow, ExperimentError> {
        let sel: Vec<_> = recs
            .iter()
            .filter(|(v, _)| group.is_none() || v.group() == group)
            .collect();
        Ok(RegretRow {
            group,
            visits: sel.len(),
            pipeline: true_regret(sel.iter().map(|(v, r)| (v.visit_id.as_str(), *r)), truth)?,
            behavior: true_regret(
                sel.iter()
                    .map(|(v, _)| (v.visit_id.as_str(), v.prescribed_regimen)),
                truth,
            )?,
        })
    };
    let mut rows = Vec::new();
    for g in Group::ALL {
        if recs.iter().any(|(v, _)| v.group() == Some(g)) {
            rows.push(row(Some(g))?);
        }
    }
    rows.push(row(None)?);
    Ok(rows)
}

pub fn run_experiment(
    cohort: &Cohort,
    cfg: &ExperimentConfig,
    truth: Option<&GroundTruth>,
) -> Result<ExperimentOutput, ExperimentError> {
    let included = inclusion_filter(cohort);
    let grouped = group_by_current(&included);
    let mut splits = BTreeMap::new();
    for g in Group::ALL {
        let members = grouped
            .groups
            .get(&g)
            .ok_or(ExperimentError::EmptyGroup(g))?;
        let (train, test) =
            split(members, cfg.split_seed(g)).map_err(|source| ExperimentError::Preprocess {
                stage: format!("split {g}"),
                source,
            })?;
        splits.insert(g, GroupSplit { train, test });
    }

    let specs = tree_specs();
    let trained: Vec<Trained> = specs
        .par_iter()
        .enumerate()
        .map(|(k, spec)| train_one(k, spec, &splits[&spec.contrast.group].train, cfg))
        .collect::<Result<_, _>>()?;

    let trees: BTreeMap<String, PolicyTree> = trained
        .iter()
        .map(|t| (t.tree.name.clone(), t.tree.clone()))
        .collect();
    let pipelines = assemble(&trees)?;

    let train_all = concat(splits.values().map(|s| &s.train));
    let test = concat(splits.values().map(|s| &s.test));
    let mut gtm_cfg = cfg.gtm.clone();
    gtm_cfg.forest.seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(10_000);
    let gtms = train_gtms(&train_all, &gtm_cfg)?;
    let report = evaluate_pipelines(&pipelines, &gtms, &test, &cfg.evaluation)?;
    let regret = truth
        .map(|gt| regret_rows(&pipelines, &test, gt))
        .transpose()?;

    let mut matched = BTreeMap::new();
    let mut reports = Vec::new();
    for t in trained {
        matched.insert(t.report.name.clone(), t.matched);
        reports.push(t.report);
    }
    Ok(ExperimentOutput {
        included: included.len(),
        unsupported: grouped.unsupported_count(),
        splits,
        matched,
        trees: reports,
        pipelines,
        gtms,
        report,
        regret,
    })
}
