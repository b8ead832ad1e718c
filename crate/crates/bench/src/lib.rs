//! Shared inputs for the benchmarks.

use glyco::cohort::{inclusion_filter, Cohort};
use glyco::debias::{emulate_trial, Contrast, DebiasConfig, MatchedDataset};
use glyco::forest::ForestParams;
use glyco::regimen::{Group, Regimen};
use glyco::synthgen::{generate, GeneratorConfig};

/// Included visits from a seeded synthetic cohort.
pub fn cohort(n: usize) -> Cohort {
    let cfg = GeneratorConfig {
        n_visits: n,
        seed: 11,
        ..GeneratorConfig::default()
    };
    inclusion_filter(&generate(&cfg).expect("generator config is valid").0)
}

/// The metformin to metformin-plus-insulin contrast.
pub fn contrast() -> Contrast {
    Contrast::new(
        Group::MetforminMono,
        Regimen::MetforminMono,
        Regimen::MetforminPlusInsulin,
    )
    .expect("admissible contrast")
}

pub fn forest_params(trees: usize) -> ForestParams {
    ForestParams {
        tree_count: trees,
        ..ForestParams::default()
    }
}

pub fn matched(n: usize) -> MatchedDataset {
    emulate_trial(
        &cohort(n),
        &contrast(),
        &DebiasConfig::default(),
        &forest_params(30),
    )
    .expect("matching succeeds")
}
