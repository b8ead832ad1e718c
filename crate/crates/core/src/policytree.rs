//! Shallow axis-aligned policy trees trained to maximize class-weighted
//! estimated HbA1c reduction on a matched dataset.
//!
//! Candidate splits are the deciles of each continuous feature plus the
//! contraindication flag. Depth ≤ 2 is searched exactly; deeper trees grow
//! greedily, one best depth-1 split per node.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{feature_vector, Feature, PatientVisit};
use crate::debias::{Arm, Contrast, MatchedDataset};
use crate::forest::{ForestError, ForestModel, ForestParams, VisitEncoder};
use crate::preprocess::percentile_sorted;
use crate::regimen::TreatmentOption;

pub const DECILES: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("the {0} arm has no visits")]
    EmptyArm(&'static str),
    #[error("reward matrix is empty")]
    EmptyRewards,
    #[error("invalid tree: {0}")]
    InvalidTree(String),
    #[error("class weight must be >= 1, got {0}")]
    InvalidWeight(f64),
    #[error(transparent)]
    Forest(#[from] ForestError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRow {
    pub visit_id: String,
    /// Numeric visit features in `Feature::ALL` order.
    pub features: [f64; 12],
    pub arm: Arm,
    pub stay: f64,
    pub step: f64,
}

impl RewardRow {
    pub fn reward(&self, arm: Arm) -> f64 {
        match arm {
            Arm::Stay => self.stay,
            Arm::Step => self.step,
        }
    }
}

/// Estimated reduction under each of a contrast's two options, per visit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardMatrix {
    pub contrast: Contrast,
    pub rows: Vec<RewardRow>,
}

impl RewardMatrix {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Fits one forest per arm on (features → observed reduction) over that
/// arm's retained visits and evaluates both at every retained visit.
pub fn estimate_rewards(
    matched: &MatchedDataset,
    params: &ForestParams,
) -> Result<RewardMatrix, PolicyError> {
    let retained = &matched.retained;
    let encoder = VisitEncoder::fit(&retained.visits);
    let fit_arm = |arm: Arm, seed_offset: u64| -> Result<ForestModel, PolicyError> {
        let members: Vec<&PatientVisit> = retained
            .visits
            .iter()
            .zip(&retained.arms)
            .filter(|(_, a)| **a == arm)
            .map(|(v, _)| v)
            .collect();
        if members.is_empty() {
            return Err(PolicyError::EmptyArm(arm.as_str()));
        }
        let x = encoder.encode(members.iter().copied());
        let y: Vec<f64> = members.iter().map(|v| v.reduction()).collect();
        let p = params.with_seed(params.seed.wrapping_add(seed_offset));
        Ok(ForestModel::fit(&x, &y, &p)?)
    };
    let stay_model = fit_arm(Arm::Stay, 0)?;
    let step_model = fit_arm(Arm::Step, 1)?;
    let rows = retained
        .visits
        .iter()
        .zip(&retained.arms)
        .map(|(v, &arm)| {
            let x = encoder.encode_row(v);
            RewardRow {
                visit_id: v.visit_id.clone(),
                features: feature_vector(v),
                arm,
                stay: stay_model.predict_row(&x),
                step: step_model.predict_row(&x),
            }
        })
        .collect();
    Ok(RewardMatrix {
        contrast: matched.contrast,
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    /// Visits observed on the step option count `alpha` times.
    #[default]
    SampleWeight,
    /// On visits observed on the step option, the stay reward is multiplied
    /// by `alpha`.
    StayRewardScale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeConfig {
    pub alpha: f64,
    pub weighting: ClassWeighting,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub features: Vec<Feature>,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig {
            alpha: 2.0,
            weighting: ClassWeighting::SampleWeight,
            max_depth: 2,
            min_leaf: 20,
            features: Feature::ALL.to_vec(),
        }
    }
}

impl TreeConfig {
    /// Weighted (stay, step) rewards of a row.
    pub fn weighted(&self, row: &RewardRow) -> (f64, f64) {
        match (self.weighting, row.arm) {
            (_, Arm::Stay) => (row.stay, row.step),
            (ClassWeighting::SampleWeight, Arm::Step) => {
                (self.alpha * row.stay, self.alpha * row.step)
            }
            (ClassWeighting::StayRewardScale, Arm::Step) => (self.alpha * row.stay, row.step),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyNode {
    /// `feature < threshold` goes left, `feature >= threshold` right.
    Split {
        feature: Feature,
        threshold: f64,
        left: usize,
        right: usize,
    },
    /// Boolean feature: false goes left, true right.
    Flag {
        feature: Feature,
        left: usize,
        right: usize,
    },
    Leaf {
        action: TreatmentOption,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Left,
    Right,
}

/// One node visited while routing a visit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub node: usize,
    pub feature: Feature,
    /// `None` for boolean splits.
    pub threshold: Option<f64>,
    pub value: f64,
    pub branch: Branch,
}

impl std::fmt::Display for Decision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match (self.threshold, self.branch) {
            (Some(t), Branch::Right) => {
                write!(f, "{} {} >= {}", self.feature.name(), self.value, t)
            }
            (Some(t), Branch::Left) => write!(f, "{} {} < {}", self.feature.name(), self.value, t),
            (None, Branch::Right) => write!(f, "{} = true", self.feature.name()),
            (None, Branch::Left) => write!(f, "{} = false", self.feature.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTree {
    pub name: String,
    pub stay: TreatmentOption,
    pub step: TreatmentOption,
    /// Root at index 0; children always follow their parent.
    pub nodes: Vec<PolicyNode>,
}

impl PolicyTree {
    pub fn leaf(
        name: impl Into<String>,
        stay: TreatmentOption,
        step: TreatmentOption,
        action: TreatmentOption,
    ) -> PolicyTree {
        PolicyTree {
            name: name.into(),
            stay,
            step,
            nodes: vec![PolicyNode::Leaf { action }],
        }
    }

    /// Structural checks: child indices point forward and in range, leaves
    /// carry one of the two options, and only boolean features use flag splits.
    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: String| Err(PolicyError::InvalidTree(format!("{}: {m}", self.name)));
        if self.nodes.is_empty() {
            return bad("no nodes".into());
        }
        let mut parents = vec![0usize; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            match *node {
                PolicyNode::Leaf { action } => {
                    if action != self.stay && action != self.step {
                        return bad(format!("leaf {i} action {action} is neither option"));
                    }
                }
                PolicyNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    if feature.is_boolean() {
                        return bad(format!(
                            "node {i}: threshold split on boolean {}",
                            feature.name()
                        ));
                    }
                    if !threshold.is_finite() {
                        return bad(format!("node {i}: non-finite threshold"));
                    }
                    for c in [left, right] {
                        if c <= i || c >= self.nodes.len() {
                            return bad(format!("node {i}: child {c} out of order"));
                        }
                        parents[c] += 1;
                    }
                }
                PolicyNode::Flag {
                    feature,
                    left,
                    right,
                } => {
                    if !feature.is_boolean() {
                        return bad(format!(
                            "node {i}: flag split on continuous {}",
                            feature.name()
                        ));
                    }
                    for c in [left, right] {
                        if c <= i || c >= self.nodes.len() {
                            return bad(format!("node {i}: child {c} out of order"));
                        }
                        parents[c] += 1;
                    }
                }
            }
        }
        if parents[1..].iter().any(|&p| p != 1) {
            return bad("every non-root node needs exactly one parent".into());
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[PolicyNode], at: usize) -> usize {
            match nodes[at] {
                PolicyNode::Leaf { .. } => 0,
                PolicyNode::Split { left, right, .. } | PolicyNode::Flag { left, right, .. } => {
                    1 + go(nodes, left).max(go(nodes, right))
                }
            }
        }
        go(&self.nodes, 0)
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, PolicyNode::Leaf { .. }))
            .count()
    }

    /// Features referenced by any split.
    pub fn features(&self) -> Vec<Feature> {
        let mut fs: Vec<Feature> = self
            .nodes
            .iter()
            .filter_map(|n| match *n {
                PolicyNode::Split { feature, .. } | PolicyNode::Flag { feature, .. } => {
                    Some(feature)
                }
                PolicyNode::Leaf { .. } => None,
            })
            .collect();
        fs.sort();
        fs.dedup();
        fs
    }

    /// Routes a raw feature vector (`Feature::ALL` order).
    pub fn route(&self, features: &[f64; 12]) -> (TreatmentOption, Vec<Decision>) {
        let mut at = 0;
        let mut path = Vec::new();
        loop {
            match self.nodes[at] {
                PolicyNode::Leaf { action } => return (action, path),
                PolicyNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    let value = features[feature.index()];
                    let branch = if value >= threshold {
                        Branch::Right
                    } else {
                        Branch::Left
                    };
                    path.push(Decision {
                        node: at,
                        feature,
                        threshold: Some(threshold),
                        value,
                        branch,
                    });
                    at = if branch == Branch::Right { right } else { left };
                }
                PolicyNode::Flag {
                    feature,
                    left,
                    right,
                } => {
                    let value = features[feature.index()];
                    let branch = if value != 0.0 {
                        Branch::Right
                    } else {
                        Branch::Left
                    };
                    path.push(Decision {
                        node: at,
                        feature,
                        threshold: None,
                        value,
                        branch,
                    });
                    at = if branch == Branch::Right { right } else { left };
                }
            }
        }
    }

    pub fn decide(&self, v: &PatientVisit) -> (TreatmentOption, Vec<Decision>) {
        self.route(&feature_vector(v))
    }

    /// Follows recorded branches instead of feature values, checking that
    /// each decision names the node's test. Returns the leaf reached.
    pub fn replay(&self, path: &[Decision]) -> Option<TreatmentOption> {
        let mut at = 0;
        let mut steps = path.iter();
        loop {
            match self.nodes[at] {
                PolicyNode::Leaf { action } => return steps.next().is_none().then_some(action),
                PolicyNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    let d = steps.next()?;
                    if d.node != at || d.feature != feature || d.threshold != Some(threshold) {
                        return None;
                    }
                    at = if d.branch == Branch::Right {
                        right
                    } else {
                        left
                    };
                }
                PolicyNode::Flag {
                    feature,
                    left,
                    right,
                } => {
                    let d = steps.next()?;
                    if d.node != at || d.feature != feature || d.threshold.is_some() {
                        return None;
                    }
                    at = if d.branch == Branch::Right {
                        right
                    } else {
                        left
                    };
                }
            }
        }
    }
}

pub fn predict_action(tree: &PolicyTree, v: &PatientVisit) -> TreatmentOption {
    tree.decide(v).0
}

/// Class-weighted objective, summed over rows in order.
pub fn objective(tree: &PolicyTree, rm: &RewardMatrix, cfg: &TreeConfig) -> f64 {
    let mut j = 0.0;
    for row in &rm.rows {
        let (stay, step) = cfg.weighted(row);
        let (action, _) = tree.route(&row.features);
        j += if action == tree.step { step } else { stay };
    }
    j
}

/// A split candidate in the search grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitCandidate {
    Threshold(Feature, f64),
    Flag(Feature),
}

impl SplitCandidate {
    pub fn goes_right(&self, features: &[f64; 12]) -> bool {
        match *self {
            SplitCandidate::Threshold(f, t) => features[f.index()] >= t,
            SplitCandidate::Flag(f) => features[f.index()] != 0.0,
        }
    }

    fn sort_key(&self) -> (usize, f64) {
        match *self {
            SplitCandidate::Threshold(f, t) => (f.index(), t),
            SplitCandidate::Flag(f) => (f.index(), 0.0),
        }
    }
}

/// Deciles of each continuous feature (deduplicated, ascending) and one flag
/// split per boolean feature, in feature order.
pub fn candidate_grid(rm: &RewardMatrix, features: &[Feature]) -> Vec<SplitCandidate> {
    let mut features = features.to_vec();
    features.sort();
    features.dedup();
    let mut out = Vec::new();
    for f in features {
        if f.is_boolean() {
            out.push(SplitCandidate::Flag(f));
            continue;
        }
        let mut col: Vec<f64> = rm.rows.iter().map(|r| r.features[f.index()]).collect();
        if col.is_empty() {
            continue;
        }
        col.sort_by(f64::total_cmp);
        let mut ts: Vec<f64> = DECILES
            .iter()
            .map(|&q| percentile_sorted(&col, q).expect("non-empty"))
            .collect();
        ts.dedup();
        out.extend(ts.into_iter().map(|t| SplitCandidate::Threshold(f, t)));
    }
    out
}

#[derive(Debug, Clone)]
enum Sub {
    Leaf(Arm),
    Split(usize, Box<Sub>, Box<Sub>),
}

#[derive(Debug, Clone)]
struct Scored {
    j: f64,
    depth: usize,
    step_count: usize,
    key: Vec<(usize, f64)>,
    tree: Sub,
}

/// Total order on candidates: higher objective, then shallower, then fewer
/// visits sent to the step option, then lexicographic (feature, threshold).
fn better(a: &Scored, b: &Scored) -> bool {
    let ord =
        b.j.total_cmp(&a.j)
            .then(a.depth.cmp(&b.depth))
            .then(a.step_count.cmp(&b.step_count))
            .then_with(|| {
                for (x, y) in a.key.iter().zip(&b.key) {
                    let o = x.0.cmp(&y.0).then(x.1.total_cmp(&y.1));
                    if o != Ordering::Equal {
                        return o;
                    }
                }
                a.key.len().cmp(&b.key.len())
            });
    ord == Ordering::Less
}

struct Search<'a> {
    weighted: Vec<(f64, f64)>,
    right: Vec<Vec<bool>>,
    cands: &'a [SplitCandidate],
    min_leaf: usize,
}

impl Search<'_> {
    fn leaf(&self, rows: &[usize]) -> Scored {
        let (mut stay, mut step) = (0.0, 0.0);
        for &i in rows {
            stay += self.weighted[i].0;
            step += self.weighted[i].1;
        }
        let (arm, j, step_count) = if step > stay {
            (Arm::Step, step, rows.len())
        } else {
            (Arm::Stay, stay, 0)
        };
        Scored {
            j,
            depth: 0,
            step_count,
            key: Vec::new(),
            tree: Sub::Leaf(arm),
        }
    }

    fn partition(&self, c: usize, rows: &[usize]) -> (Vec<usize>, Vec<usize>) {
        rows.iter().partition(|&&i| !self.right[c][i])
    }

    fn join(&self, c: usize, l: Scored, r: Scored) -> Option<Scored> {
        if let (Sub::Leaf(a), Sub::Leaf(b)) = (&l.tree, &r.tree) {
            if a == b {
                return None;
            }
        }
        let mut key = vec![self.cands[c].sort_key()];
        key.extend(l.key.iter().copied());
        key.extend(r.key.iter().copied());
        Some(Scored {
            j: l.j + r.j,
            depth: 1 + l.depth.max(r.depth),
            step_count: l.step_count + r.step_count,
            key,
            tree: Sub::Split(c, Box::new(l.tree), Box::new(r.tree)),
        })
    }

    /// Best tree of depth at most `depth`, exact.
    fn exact(&self, rows: &[usize], depth: usize) -> Scored {
        let mut best = self.leaf(rows);
        if depth == 0 || rows.len() < 2 * self.min_leaf {
            return best;
        }
        for c in 0..self.cands.len() {
            let (l, r) = self.partition(c, rows);
            if l.len() < self.min_leaf || r.len() < self.min_leaf {
                continue;
            }
            let (ls, rs) = (self.exact(&l, depth - 1), self.exact(&r, depth - 1));
            if let Some(s) = self.join(c, ls, rs) {
                if better(&s, &best) {
                    best = s;
                }
            }
        }
        best
    }

    /// Greedy growth: best depth-1 split at each node, recursing until the
    /// depth budget is spent or no split helps.
    fn greedy(&self, rows: &[usize], depth: usize) -> Scored {
        let stump = self.exact(rows, depth.min(1));
        let Sub::Split(c, _, _) = stump.tree else {
            return stump;
        };
        let (l, r) = self.partition(c, rows);
        let (ls, rs) = (self.greedy(&l, depth - 1), self.greedy(&r, depth - 1));
        self.join(c, ls, rs).unwrap_or_else(|| self.leaf(rows))
    }
}

fn emit(
    sub: &Sub,
    cands: &[SplitCandidate],
    stay: TreatmentOption,
    step: TreatmentOption,
    nodes: &mut Vec<PolicyNode>,
) -> usize {
    let at = nodes.len();
    match sub {
        Sub::Leaf(arm) => {
            let action = if *arm == Arm::Step { step } else { stay };
            nodes.push(PolicyNode::Leaf { action });
        }
        Sub::Split(c, l, r) => {
            nodes.push(PolicyNode::Leaf { action: stay });
            let left = emit(l, cands, stay, step, nodes);
            let right = emit(r, cands, stay, step, nodes);
            nodes[at] = match cands[*c] {
                SplitCandidate::Threshold(feature, threshold) => PolicyNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                },
                SplitCandidate::Flag(feature) => PolicyNode::Flag {
                    feature,
                    left,
                    right,
                },
            };
        }
    }
    at
}

/// Trains a policy tree for the reward matrix's contrast. When no split
/// candidate helps (or none exist) the result is a single leaf carrying the
/// better constant action.
pub fn train_tree(
    rm: &RewardMatrix,
    name: &str,
    cfg: &TreeConfig,
) -> Result<PolicyTree, PolicyError> {
    if rm.is_empty() {
        return Err(PolicyError::EmptyRewards);
    }
    if cfg.alpha.is_nan() || cfg.alpha < 1.0 {
        return Err(PolicyError::InvalidWeight(cfg.alpha));
    }
    let cands = candidate_grid(rm, &cfg.features);
    if cands.is_empty() {
        log::warn!("{name}: no candidate splits, fitting a constant policy");
    }
    let search = Search {
        weighted: rm.rows.iter().map(|r| cfg.weighted(r)).collect(),
        right: cands
            .iter()
            .map(|c| rm.rows.iter().map(|r| c.goes_right(&r.features)).collect())
            .collect(),
        cands: &cands,
        min_leaf: cfg.min_leaf.max(1),
    };
    let rows: Vec<usize> = (0..rm.len()).collect();
    let best = if cfg.max_depth <= 2 {
        search.exact(&rows, cfg.max_depth)
    } else {
        search.greedy(&rows, cfg.max_depth)
    };
    let (stay, step) = (rm.contrast.stay, rm.contrast.step);
    let mut nodes = Vec::new();
    emit(&best.tree, &cands, stay, step, &mut nodes);
    let tree = PolicyTree {
        name: name.to_string(),
        stay,
        step,
        nodes,
    };
    debug_assert!(tree.validate().is_ok());
    Ok(tree)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regimen::{Group, Regimen};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn contrast() -> Contrast {
        Contrast::new(
            Group::NoMedication,
            Regimen::NoMedication,
            Regimen::InsulinMono,
        )
        .unwrap()
    }

    fn rm_from(rows: Vec<([f64; 12], Arm, f64, f64)>) -> RewardMatrix {
        RewardMatrix {
            contrast: contrast(),
            rows: rows
                .into_iter()
                .enumerate()
                .map(|(i, (features, arm, stay, step))| RewardRow {
                    visit_id: format!("v{i}"),
                    features,
                    arm,
                    stay,
                    step,
                })
                .collect(),
        }
    }

    fn random_rm(n: usize, seed: u64) -> RewardMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rm_from(
            (0..n)
                .map(|_| {
                    let mut f = [0.0; 12];
                    for (j, x) in f.iter_mut().enumerate() {
                        *x = if j == 11 {
                            f64::from(u8::from(rng.random_bool(0.2)))
                        } else {
                            rng.random_range(5.0..12.0)
                        };
                    }
                    let arm = if rng.random_bool(0.4) {
                        Arm::Step
                    } else {
                        Arm::Stay
                    };
                    (
                        f,
                        arm,
                        rng.random_range(-1.0..2.0),
                        rng.random_range(-1.0..2.0),
                    )
                })
                .collect(),
        )
    }

    fn stump(c: SplitCandidate, left: TreatmentOption, right: TreatmentOption) -> PolicyTree {
        let root = match c {
            SplitCandidate::Threshold(feature, threshold) => PolicyNode::Split {
                feature,
                threshold,
                left: 1,
                right: 2,
            },
            SplitCandidate::Flag(feature) => PolicyNode::Flag {
                feature,
                left: 1,
                right: 2,
            },
        };
        let ct = contrast();
        PolicyTree {
            name: "stump".into(),
            stay: ct.stay,
            step: ct.step,
            nodes: vec![
                root,
                PolicyNode::Leaf { action: left },
                PolicyNode::Leaf { action: right },
            ],
        }
    }

    /// Every depth ≤ 1 tree over the grid, with every leaf-action pair.
    fn brute_force_depth1(rm: &RewardMatrix, cfg: &TreeConfig) -> f64 {
        let ct = rm.contrast;
        let mut best = f64::NEG_INFINITY;
        for a in [ct.stay, ct.step] {
            best = best.max(objective(
                &PolicyTree::leaf("l", ct.stay, ct.step, a),
                rm,
                cfg,
            ));
        }
        for c in candidate_grid(rm, &cfg.features) {
            for l in [ct.stay, ct.step] {
                for r in [ct.stay, ct.step] {
                    best = best.max(objective(&stump(c, l, r), rm, cfg));
                }
            }
        }
        best
    }

    #[test]
    fn dominant_step_gives_single_step_leaf() {
        let rm = random_rm(50, 1);
        let rm = RewardMatrix {
            rows: rm
                .rows
                .into_iter()
                .map(|r| RewardRow {
                    step: r.stay + 0.5,
                    ..r
                })
                .collect(),
            ..rm
        };
        let t = train_tree(&rm, "t", &TreeConfig::default()).unwrap();
        assert_eq!(
            t.nodes,
            vec![PolicyNode::Leaf {
                action: contrast().step
            }]
        );
    }

    #[test]
    fn separable_reward_recovers_threshold() {
        let mut rows = Vec::new();
        for i in 0..=100 {
            let mut f = [7.0; 12];
            f[11] = 0.0;
            f[Feature::Hba1cLast.index()] = 6.0 + f64::from(i) / 25.0;
            let step_wins = f[Feature::Hba1cLast.index()] >= 8.0;
            rows.push((f, Arm::Stay, 1.0, if step_wins { 2.0 } else { 0.0 }));
        }
        let rm = rm_from(rows);
        let grid = candidate_grid(&rm, &[Feature::Hba1cLast]);
        assert!(grid.contains(&SplitCandidate::Threshold(Feature::Hba1cLast, 8.0)));
        let cfg = TreeConfig {
            max_depth: 1,
            min_leaf: 1,
            ..TreeConfig::default()
        };
        let t = train_tree(&rm, "t", &cfg).unwrap();
        assert_eq!(
            t.nodes[0],
            PolicyNode::Split {
                feature: Feature::Hba1cLast,
                threshold: 8.0,
                left: 1,
                right: 2
            }
        );
        assert_eq!(
            t.nodes[2],
            PolicyNode::Leaf {
                action: contrast().step
            }
        );
    }

    #[test]
    fn depth1_matches_brute_force() {
        for seed in 0..20 {
            let rm = random_rm(200, seed);
            let cfg = TreeConfig {
                max_depth: 1,
                min_leaf: 1,
                ..TreeConfig::default()
            };
            let t = train_tree(&rm, "t", &cfg).unwrap();
            assert_eq!(
                objective(&t, &rm, &cfg),
                brute_force_depth1(&rm, &cfg),
                "seed {seed}"
            );
        }
    }

    #[test]
    fn depth2_matches_brute_force_small() {
        for seed in 0..4 {
            let rm = random_rm(40, 100 + seed);
            let cfg = TreeConfig {
                max_depth: 2,
                min_leaf: 1,
                features: vec![
                    Feature::Hba1cLast,
                    Feature::BmiLast,
                    Feature::KidneyContraindication,
                ],
                ..TreeConfig::default()
            };
            let t = train_tree(&rm, "t", &cfg).unwrap();
            // enumerate every depth-2 tree over the grid
            let ct = rm.contrast;
            let grid = candidate_grid(&rm, &cfg.features);
            let acts = [ct.stay, ct.step];
            let mut best = brute_force_depth1(&rm, &cfg);
            for &root in &grid {
                for &lc in &grid {
                    for &rc in &grid {
                        for mask in 0..16u8 {
                            let a = |k: u8| acts[usize::from((mask >> k) & 1)];
                            let node = |c: SplitCandidate, l, r| match c {
                                SplitCandidate::Threshold(feature, threshold) => {
                                    PolicyNode::Split {
                                        feature,
                                        threshold,
                                        left: l,
                                        right: r,
                                    }
                                }
                                SplitCandidate::Flag(feature) => PolicyNode::Flag {
                                    feature,
                                    left: l,
                                    right: r,
                                },
                            };
                            let tree = PolicyTree {
                                name: "b".into(),
                                stay: ct.stay,
                                step: ct.step,
                                nodes: vec![
                                    node(root, 1, 4),
                                    node(lc, 2, 3),
                                    PolicyNode::Leaf { action: a(0) },
                                    PolicyNode::Leaf { action: a(1) },
                                    node(rc, 5, 6),
                                    PolicyNode::Leaf { action: a(2) },
                                    PolicyNode::Leaf { action: a(3) },
                                ],
                            };
                            best = best.max(objective(&tree, &rm, &cfg));
                        }
                    }
                }
            }
            let got = objective(&t, &rm, &cfg);
            assert!(
                (got - best).abs() <= 1e-9 * best.abs().max(1.0),
                "seed {seed}: {got} vs {best}"
            );
            assert!(got >= best - 1e-9);
            assert!(t.depth() <= 2);
        }
    }

    #[test]
    fn greedy_depth3_respects_budget() {
        let rm = random_rm(300, 9);
        let cfg = TreeConfig {
            max_depth: 3,
            min_leaf: 5,
            ..TreeConfig::default()
        };
        let t = train_tree(&rm, "t", &cfg).unwrap();
        t.validate().unwrap();
        assert!(t.depth() <= 3);
        // never worse than the best stump
        let stump_cfg = TreeConfig {
            max_depth: 1,
            ..cfg.clone()
        };
        let s = train_tree(&rm, "s", &stump_cfg).unwrap();
        assert!(objective(&t, &rm, &cfg) >= objective(&s, &rm, &cfg) - 1e-9);
    }

    #[test]
    fn no_candidates_gives_constant_policy() {
        let rm = random_rm(30, 2);
        let cfg = TreeConfig {
            features: vec![],
            ..TreeConfig::default()
        };
        let t = train_tree(&rm, "t", &cfg).unwrap();
        assert_eq!(t.nodes.len(), 1);
        let leaf_j = |a| objective(&PolicyTree::leaf("x", t.stay, t.step, a), &rm, &cfg);
        assert_eq!(objective(&t, &rm, &cfg), leaf_j(t.stay).max(leaf_j(t.step)));
    }

    #[test]
    fn alpha_favors_tree_with_more_step_arm_reward() {
        // T1 prescribes step to rows 0 and 1, T2 to rows 2 and 3.
        let mut f = [[7.0; 12]; 4];
        for (i, row) in f.iter_mut().enumerate() {
            row[Feature::Age.index()] = i as f64;
            row[11] = 0.0;
        }
        let rm = rm_from(vec![
            (f[0], Arm::Step, 0.0, 2.0),
            (f[1], Arm::Stay, 0.0, 1.0),
            (f[2], Arm::Stay, 0.0, 2.0),
            (f[3], Arm::Stay, 0.0, 1.0),
        ]);
        let ct = contrast();
        let t1 = stump(
            SplitCandidate::Threshold(Feature::Age, 2.0),
            ct.step,
            ct.stay,
        );
        let t2 = stump(
            SplitCandidate::Threshold(Feature::Age, 2.0),
            ct.stay,
            ct.step,
        );
        let at = |alpha| TreeConfig {
            alpha,
            ..TreeConfig::default()
        };
        assert_eq!(objective(&t1, &rm, &at(1.0)), objective(&t2, &rm, &at(1.0)));
        for alpha in [1.5, 2.0, 4.0] {
            assert!(objective(&t1, &rm, &at(alpha)) > objective(&t2, &rm, &at(alpha)));
        }
    }

    #[test]
    fn routing_is_inclusive_on_the_right() {
        let ct = contrast();
        let t = stump(
            SplitCandidate::Threshold(Feature::Hba1cLast, 8.05),
            ct.stay,
            ct.step,
        );
        let mut v = crate::cohort::tests::visit("a");
        v.hba1c_last = 8.05;
        let (a, path) = t.decide(&v);
        assert_eq!(a, ct.step);
        assert_eq!(path[0].branch, Branch::Right);
        assert_eq!(path[0].to_string(), "hba1c_last 8.05 >= 8.05");
        assert_eq!(t.replay(&path), Some(a));
        v.hba1c_last = 8.04;
        assert_eq!(predict_action(&t, &v), ct.stay);
        let leaf = PolicyTree::leaf("l", ct.stay, ct.step, ct.step);
        assert_eq!(predict_action(&leaf, &v), ct.step);
    }

    #[test]
    fn validation_rejects_malformed_trees() {
        let ct = contrast();
        let mut t = stump(
            SplitCandidate::Flag(Feature::KidneyContraindication),
            ct.stay,
            ct.step,
        );
        t.validate().unwrap();
        t.nodes[0] = PolicyNode::Flag {
            feature: Feature::Age,
            left: 1,
            right: 2,
        };
        assert!(t.validate().is_err());
        let mut t = stump(
            SplitCandidate::Threshold(Feature::Age, 3.0),
            ct.stay,
            ct.step,
        );
        t.nodes[1] = PolicyNode::Leaf {
            action: TreatmentOption::Regimen(Regimen::MetforminMono),
        };
        assert!(t.validate().is_err());
        let mut t = stump(
            SplitCandidate::Threshold(Feature::Age, 3.0),
            ct.stay,
            ct.step,
        );
        t.nodes[0] = PolicyNode::Split {
            feature: Feature::Age,
            threshold: 3.0,
            left: 1,
            right: 1,
        };
        assert!(t.validate().is_err());
    }
}
