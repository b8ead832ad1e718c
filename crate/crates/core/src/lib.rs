//! Treatment-progression policy learning for type 2 diabetes.
//!
//! Visits with HbA1c and BMI histories are filtered, split per current
//! regimen, matched into trial-like stay/step arms, and used to train shallow
//! policy trees. Trees compose into per-group pipelines that step up to the
//! most aggressive option first, and pipelines are scored against the
//! recorded prescriptions with per-option outcome models.

pub mod cohort;
pub mod debias;
pub mod evaluate;
pub mod experiment;
pub mod forest;
pub mod pipeline;
pub mod policytree;
pub mod preprocess;
pub mod regimen;
pub mod synthgen;

pub use cohort::{Cohort, Feature, PatientVisit};
pub use debias::{Arm, Contrast, MatchedDataset};
pub use evaluate::{EvaluationReport, GtmSet};
pub use experiment::{ExperimentConfig, ExperimentOutput};
pub use forest::{ForestModel, ForestParams};
pub use pipeline::{Pipeline, PipelineSet, Recommendation, Trace};
pub use policytree::{PolicyTree, RewardMatrix, TreeConfig};
pub use regimen::{Group, Regimen, TreatmentOption};
pub use synthgen::{GeneratorConfig, GroundTruth};
