//! Seeded regression forest: bootstrap-sampled CART trees with variance
//! reduction splits, averaged at prediction time.
//!
//! Tree `i` draws all of its randomness from a ChaCha8 stream seeded with the
//! forest seed on stream `i`, so parallel training reproduces sequential
//! training exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{Feature, PatientVisit};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ForestError {
    #[error("{rows} feature rows but {targets} targets")]
    ShapeMismatch { rows: usize, targets: usize },
    #[error("{rows} rows is fewer than min_leaf = {min_leaf}")]
    TooFewRows { rows: usize, min_leaf: usize },
    #[error("non-finite value in training data")]
    NonFinite,
    #[error("input is missing schema column `{0}`")]
    SchemaMismatch(String),
    #[error("row {row} has {got} values, expected {expected}")]
    RowWidth {
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("unsupported model format version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed model document: {0}")]
    Malformed(String),
}

/// Row-major numeric table with named columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl FeatureTable {
    pub fn new(columns: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self, ForestError> {
        for (i, r) in rows.iter().enumerate() {
            if r.len() != columns.len() {
                return Err(ForestError::RowWidth {
                    row: i,
                    got: r.len(),
                    expected: columns.len(),
                });
            }
        }
        Ok(FeatureTable { columns, rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// The same table with columns reordered to `schema`.
    pub fn select(&self, schema: &[String]) -> Result<FeatureTable, ForestError> {
        let idx: Vec<usize> = schema
            .iter()
            .map(|name| {
                self.columns
                    .iter()
                    .position(|c| c == name)
                    .ok_or_else(|| ForestError::SchemaMismatch(name.clone()))
            })
            .collect::<Result<_, _>>()?;
        Ok(FeatureTable {
            columns: schema.to_vec(),
            rows: self
                .rows
                .iter()
                .map(|r| idx.iter().map(|&j| r[j]).collect())
                .collect(),
        })
    }
}

/// Turns visits into regressor inputs: every numeric feature plus one-hot
/// sex and race indicators over the levels seen at fit time. Unseen levels
/// encode as all zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitEncoder {
    pub sex_levels: Vec<String>,
    pub race_levels: Vec<String>,
}

impl VisitEncoder {
    pub fn fit<'a>(visits: impl IntoIterator<Item = &'a PatientVisit>) -> VisitEncoder {
        let mut sex = std::collections::BTreeSet::new();
        let mut race = std::collections::BTreeSet::new();
        for v in visits {
            sex.insert(v.sex.clone());
            race.insert(v.race.clone());
        }
        VisitEncoder {
            sex_levels: sex.into_iter().collect(),
            race_levels: race.into_iter().collect(),
        }
    }

    pub fn columns(&self) -> Vec<String> {
        Feature::ALL
            .iter()
            .map(|f| f.name().to_string())
            .chain(self.sex_levels.iter().map(|l| format!("sex={l}")))
            .chain(self.race_levels.iter().map(|l| format!("race={l}")))
            .collect()
    }

    pub fn encode_row(&self, v: &PatientVisit) -> Vec<f64> {
        let mut row: Vec<f64> = Feature::ALL.iter().map(|f| f.value(v)).collect();
        row.extend(
            self.sex_levels
                .iter()
                .map(|l| f64::from(u8::from(*l == v.sex))),
        );
        row.extend(
            self.race_levels
                .iter()
                .map(|l| f64::from(u8::from(*l == v.race))),
        );
        row
    }

    pub fn encode<'a>(&self, visits: impl IntoIterator<Item = &'a PatientVisit>) -> FeatureTable {
        FeatureTable {
            columns: self.columns(),
            rows: visits.into_iter().map(|v| self.encode_row(v)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub tree_count: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features sampled per node; `None` means `ceil(sqrt(d))`.
    pub features_per_split: Option<usize>,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            tree_count: 100,
            max_depth: 10,
            min_leaf: 5,
            features_per_split: None,
            seed: 0,
        }
    }
}

impl ForestParams {
    pub fn with_seed(&self, seed: u64) -> ForestParams {
        ForestParams {
            seed,
            ..self.clone()
        }
    }

    fn mtry(&self, d: usize) -> usize {
        self.features_per_split
            .unwrap_or_else(|| (d as f64).sqrt().ceil() as usize)
            .clamp(1, d.max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreeNode {
    /// Rows with `x[feature] < threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<TreeNode>,
}

impl RegressionTree {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                TreeNode::Leaf { value } => return value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if row[feature] < threshold {
                        left
                    } else {
                        right
                    }
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[TreeNode], at: usize) -> usize {
            match nodes[at] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + go(nodes, left).max(go(nodes, right)),
            }
        }
        go(&self.nodes, 0)
    }
}

/// Column-major view of the training data.
struct Columns<'a> {
    cols: Vec<Vec<f64>>,
    y: &'a [f64],
}

struct TreeBuilder<'a> {
    data: &'a Columns<'a>,
    params: &'a ForestParams,
    mtry: usize,
    rng: ChaCha8Rng,
    nodes: Vec<TreeNode>,
    scratch: Vec<(f64, f64)>,
}

impl TreeBuilder<'_> {
    fn leaf(&mut self, samples: &[usize]) -> usize {
        let mean = samples.iter().map(|&i| self.data.y[i]).sum::<f64>() / samples.len() as f64;
        self.nodes.push(TreeNode::Leaf { value: mean });
        self.nodes.len() - 1
    }

    fn build(&mut self, samples: &mut [usize], depth: usize) -> usize {
        let min_leaf = self.params.min_leaf.max(1);
        if depth >= self.params.max_depth || samples.len() < 2 * min_leaf {
            return self.leaf(samples);
        }
        let Some((feature, threshold)) = self.best_split(samples, min_leaf) else {
            return self.leaf(samples);
        };

        let slot = self.nodes.len();
        self.nodes.push(TreeNode::Leaf { value: f64::NAN });
        let col = &self.data.cols[feature];
        let mut split_at = 0;
        for k in 0..samples.len() {
            if col[samples[k]] < threshold {
                samples.swap(split_at, k);
                split_at += 1;
            }
        }
        let (l, r) = samples.split_at_mut(split_at);
        let left = self.build(l, depth + 1);
        let right = self.build(r, depth + 1);
        self.nodes[slot] = TreeNode::Split {
            feature,
            threshold,
            left,
            right,
        };
        slot
    }

    fn best_split(&mut self, samples: &[usize], min_leaf: usize) -> Option<(usize, f64)> {
        let d = self.data.cols.len();
        let mut feats: Vec<usize> = (0..d).collect();
        for i in 0..self.mtry {
            let j = self.rng.random_range(i..d);
            feats.swap(i, j);
        }
        feats.truncate(self.mtry);

        let m = samples.len();
        let total: f64 = samples.iter().map(|&i| self.data.y[i]).sum();
        let base = total * total / m as f64;
        let mut best: Option<(f64, usize, f64)> = None;

        for &f in &feats {
            let col = &self.data.cols[f];
            self.scratch.clear();
            self.scratch
                .extend(samples.iter().map(|&i| (col[i], self.data.y[i])));
            self.scratch.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left_sum = 0.0;
            for k in 1..m {
                left_sum += self.scratch[k - 1].1;
                if k < min_leaf || m - k < min_leaf {
                    continue;
                }
                let (lo, hi) = (self.scratch[k - 1].0, self.scratch[k].0);
                if lo >= hi {
                    continue;
                }
                let right_sum = total - left_sum;
                let gain =
                    left_sum * left_sum / k as f64 + right_sum * right_sum / (m - k) as f64 - base;
                // relative floor keeps rounding noise on constant targets from splitting
                if gain <= 1e-12 * (1.0 + base.abs()) {
                    continue;
                }
                if best.is_none_or(|(g, _, _)| gain > g) {
                    let mut threshold = 0.5 * (lo + hi);
                    if threshold <= lo {
                        threshold = hi;
                    }
                    best = Some((gain, f, threshold));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }
}

fn fit_tree(data: &Columns<'_>, params: &ForestParams, index: usize) -> RegressionTree {
    let n = data.y.len();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(index as u64);
    let mut samples: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    let mut builder = TreeBuilder {
        data,
        params,
        mtry: params.mtry(data.cols.len()),
        rng,
        nodes: Vec::new(),
        scratch: Vec::with_capacity(n),
    };
    builder.build(&mut samples, 0);
    RegressionTree {
        nodes: builder.nodes,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    format_version: u32,
    feature_schema: Vec<String>,
    params: ForestParams,
    trees: Vec<RegressionTree>,
}

impl ForestModel {
    pub fn fit(
        x: &FeatureTable,
        y: &[f64],
        params: &ForestParams,
    ) -> Result<ForestModel, ForestError> {
        if x.len() != y.len() {
            return Err(ForestError::ShapeMismatch {
                rows: x.len(),
                targets: y.len(),
            });
        }
        if x.is_empty() || x.len() < params.min_leaf {
            return Err(ForestError::TooFewRows {
                rows: x.len(),
                min_leaf: params.min_leaf,
            });
        }
        let d = x.columns.len();
        let mut cols = vec![Vec::with_capacity(x.len()); d];
        for (i, row) in x.rows.iter().enumerate() {
            if row.len() != d {
                return Err(ForestError::RowWidth {
                    row: i,
                    got: row.len(),
                    expected: d,
                });
            }
            for (c, &v) in cols.iter_mut().zip(row) {
                c.push(v);
            }
        }
        if cols.iter().flatten().chain(y).any(|v| !v.is_finite()) {
            return Err(ForestError::NonFinite);
        }
        let data = Columns { cols, y };
        let trees = (0..params.tree_count.max(1))
            .into_par_iter()
            .map(|i| fit_tree(&data, params, i))
            .collect();
        Ok(ForestModel {
            format_version: MODEL_FORMAT_VERSION,
            feature_schema: x.columns.clone(),
            params: params.clone(),
            trees,
        })
    }

    pub fn feature_schema(&self) -> &[String] {
        &self.feature_schema
    }

    pub fn params(&self) -> &ForestParams {
        &self.params
    }

    pub fn trees(&self) -> &[RegressionTree] {
        &self.trees
    }

    /// Prediction for one row already in schema order.
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict_row(row)).sum::<f64>() / self.trees.len() as f64
    }

    /// Predictions for a table whose columns are matched to the schema by name.
    pub fn predict(&self, x: &FeatureTable) -> Result<Vec<f64>, ForestError> {
        let aligned;
        let table = if x.columns == self.feature_schema {
            x
        } else {
            aligned = x.select(&self.feature_schema)?;
            &aligned
        };
        Ok(table.rows.iter().map(|r| self.predict_row(r)).collect())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("forest serializes")
    }

    pub fn from_json(doc: &str) -> Result<ForestModel, ForestError> {
        let model: ForestModel =
            serde_json::from_str(doc).map_err(|e| ForestError::Malformed(e.to_string()))?;
        if model.format_version != MODEL_FORMAT_VERSION {
            return Err(ForestError::UnsupportedVersion(model.format_version));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn table(rows: Vec<Vec<f64>>) -> FeatureTable {
        let d = rows.first().map_or(0, Vec::len);
        FeatureTable::new((0..d).map(|j| format!("x{j}")).collect(), rows).unwrap()
    }

    fn random_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(0.0..10.0)).collect())
            .collect()
    }

    #[test]
    fn constant_target_predicts_constant() {
        let x = table(random_rows(60, 3, 1));
        let y = vec![7.0; 60];
        let m = ForestModel::fit(&x, &y, &ForestParams::default()).unwrap();
        let probe = table(random_rows(20, 3, 2));
        assert!(m.predict(&probe).unwrap().iter().all(|&p| p == 7.0));
    }

    #[test]
    fn depth_zero_single_tree_is_bootstrap_mean() {
        let x = table(random_rows(30, 2, 3));
        let y: Vec<f64> = (0..30).map(f64::from).collect();
        let params = ForestParams {
            tree_count: 1,
            max_depth: 0,
            seed: 11,
            ..ForestParams::default()
        };
        let m = ForestModel::fit(&x, &y, &params).unwrap();
        // replay the bootstrap draw
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        rng.set_stream(0);
        let draws: Vec<usize> = (0..30).map(|_| rng.random_range(0..30)).collect();
        let mean = draws.iter().map(|&i| y[i]).sum::<f64>() / 30.0;
        let preds = m.predict(&table(random_rows(5, 2, 4))).unwrap();
        assert!(preds.iter().all(|&p| p == mean));
    }

    #[test]
    fn linear_target_fits_well_in_sample() {
        let rows = random_rows(500, 4, 5);
        let y: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        let x = table(rows);
        let m = ForestModel::fit(&x, &y, &ForestParams::default()).unwrap();
        let p = m.predict(&x).unwrap();
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
        let ss_res: f64 = y.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum();
        let r2 = 1.0 - ss_res / ss_tot;
        assert!(r2 > 0.8, "r2 = {r2}");
    }

    #[test]
    fn saturated_forest_recovers_training_targets() {
        let rows = random_rows(200, 2, 6);
        let y: Vec<f64> = rows.iter().map(|r| r[0] * 2.0 + r[1]).collect();
        let x = table(rows);
        let params = ForestParams {
            tree_count: 200,
            max_depth: 30,
            min_leaf: 1,
            features_per_split: Some(2),
            seed: 1,
        };
        let m = ForestModel::fit(&x, &y, &params).unwrap();
        let p = m.predict(&x).unwrap();
        let mae = y.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64;
        assert!(mae < 0.6, "mae = {mae}");
    }

    #[test]
    fn permuted_columns_match_by_name() {
        let rows = random_rows(80, 3, 7);
        let y: Vec<f64> = rows.iter().map(|r| r[1] - r[2]).collect();
        let x = table(rows.clone());
        let m = ForestModel::fit(&x, &y, &ForestParams::default()).unwrap();
        let permuted = FeatureTable::new(
            vec!["x2".into(), "x0".into(), "x1".into()],
            rows.iter().map(|r| vec![r[2], r[0], r[1]]).collect(),
        )
        .unwrap();
        assert_eq!(m.predict(&permuted).unwrap(), m.predict(&x).unwrap());
        let missing = FeatureTable::new(vec!["x0".into()], vec![vec![1.0]]).unwrap();
        assert_eq!(
            m.predict(&missing),
            Err(ForestError::SchemaMismatch("x1".into()))
        );
    }

    #[test]
    fn errors_on_bad_shapes() {
        let x = table(random_rows(10, 2, 8));
        assert!(matches!(
            ForestModel::fit(&x, &[1.0; 9], &ForestParams::default()),
            Err(ForestError::ShapeMismatch { .. })
        ));
        let small = table(random_rows(3, 2, 8));
        assert!(matches!(
            ForestModel::fit(&small, &[1.0; 3], &ForestParams::default()),
            Err(ForestError::TooFewRows { .. })
        ));
    }

    #[test]
    fn json_round_trip_and_version_check() {
        let x = table(random_rows(40, 2, 9));
        let y: Vec<f64> = x.rows.iter().map(|r| r[0]).collect();
        let params = ForestParams {
            tree_count: 5,
            ..ForestParams::default()
        };
        let m = ForestModel::fit(&x, &y, &params).unwrap();
        let back = ForestModel::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.predict(&x).unwrap(), m.predict(&x).unwrap());
        let bumped = m
            .to_json()
            .replacen("\"format_version\":1", "\"format_version\":7", 1);
        assert_eq!(
            ForestModel::from_json(&bumped),
            Err(ForestError::UnsupportedVersion(7))
        );
    }

    #[test]
    fn encoder_one_hot() {
        let mut a = crate::cohort::tests::visit("a");
        a.sex = "M".into();
        let b = crate::cohort::tests::visit("b");
        let enc = VisitEncoder::fit([&a, &b]);
        assert_eq!(enc.sex_levels, ["F", "M"]);
        let cols = enc.columns();
        let row = enc.encode_row(&a);
        assert_eq!(row[cols.iter().position(|c| c == "sex=M").unwrap()], 1.0);
        assert_eq!(row[cols.iter().position(|c| c == "sex=F").unwrap()], 0.0);
        assert_eq!(row.len(), cols.len());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn deterministic_and_bounded(seed in 0u64..1000, n in 10usize..80) {
            let rows = random_rows(n, 3, seed);
            let y: Vec<f64> = rows.iter().map(|r| (r[0] * r[1]).sin() + r[2]).collect();
            let x = table(rows);
            let params = ForestParams { tree_count: 10, seed, ..ForestParams::default() };
            let a = ForestModel::fit(&x, &y, &params).unwrap();
            let b = ForestModel::fit(&x, &y, &params).unwrap();
            prop_assert_eq!(&a, &b);
            let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let probe = table(random_rows(30, 3, seed + 1));
            for p in a.predict(&probe).unwrap() {
                prop_assert!(p >= lo - 1e-9 && p <= hi + 1e-9);
            }
        }
    }
}
