use std::collections::HashSet;

use glyco::cohort::{Feature, PatientVisit};
use glyco::debias::{
    bucketize, discard_least_similar, euclidean, match_within_buckets, smd, Arm, Contrast, Pair,
};
use glyco::pipeline::reference_pipelines;
use glyco::policytree::{objective, train_tree, RewardMatrix, RewardRow, TreeConfig};
use glyco::preprocess::percentile;
use glyco::regimen::{Group, Regimen};
use proptest::prelude::*;

fn arb_visit() -> impl Strategy<Value = PatientVisit> {
    (
        (19.0f64..90.0, any::<bool>(), 0usize..4),
        (5.0f64..12.0, prop::array::uniform4(0.0f64..1.5)),
        (20.0f64..45.0, prop::array::uniform4(0.0f64..4.0)),
    )
        .prop_map(|((age, kidney, g), (last, h), (bmi, b))| {
            let current = Group::ALL[g].current();
            PatientVisit {
                visit_id: String::new(),
                age,
                sex: "F".into(),
                race: "white".into(),
                kidney_contraindication: kidney,
                hba1c_last: last,
                hba1c_p25: last - h[0] - h[1],
                hba1c_median: last - h[0],
                hba1c_mean: last - h[0] + h[2] / 2.0,
                hba1c_p75: last - h[0] + h[3],
                bmi_last: bmi,
                bmi_p25: bmi - b[0] - b[1],
                bmi_median: bmi - b[0],
                bmi_mean: bmi - b[0] + b[2] / 2.0,
                bmi_p75: bmi - b[0] + b[3],
                current_regimen: current,
                prescribed_regimen: current,
                hba1c_after: last - 0.5,
            }
        })
}

fn arb_pool() -> impl Strategy<Value = (Vec<f64>, Vec<Arm>, Vec<Vec<f64>>)> {
    (4usize..60).prop_flat_map(|n| {
        (
            prop::collection::vec(5.0f64..11.0, n),
            prop::collection::vec(any::<bool>(), n),
            prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), n),
        )
            .prop_map(|(scores, step, points)| {
                let arms = step
                    .into_iter()
                    .map(|s| if s { Arm::Step } else { Arm::Stay })
                    .collect();
                (scores, arms, points)
            })
    })
}

fn arb_rewards() -> impl Strategy<Value = RewardMatrix> {
    prop::collection::vec(
        (
            prop::array::uniform11(0.0f64..10.0),
            any::<bool>(),
            any::<bool>(),
            -1.0f64..2.0,
            -1.0f64..2.0,
        ),
        8..60,
    )
    .prop_map(|rows| {
        let contrast = Contrast::new(
            Group::MetforminMono,
            Regimen::MetforminMono,
            Regimen::MetforminPlusInsulin,
        )
        .unwrap();
        let rows = rows
            .into_iter()
            .enumerate()
            .map(|(i, (cont, flag, step_arm, stay, step))| {
                let mut features = [0.0; 12];
                for (f, x) in Feature::CONTINUOUS.into_iter().zip(cont) {
                    features[f.index()] = (x * 4.0).round() / 4.0;
                }
                features[Feature::KidneyContraindication.index()] = f64::from(u8::from(flag));
                RewardRow {
                    visit_id: format!("r{i:03}"),
                    features,
                    arm: if step_arm { Arm::Step } else { Arm::Stay },
                    stay,
                    step,
                }
            })
            .collect();
        RewardMatrix { contrast, rows }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn matching_pairs_are_valid((scores, arms, points) in arb_pool(), k in 1usize..7) {
        let buckets = bucketize(&scores, k).unwrap();
        prop_assert!(buckets.assignment.iter().all(|&b| b < buckets.count()));
        let pairs = match_within_buckets(&buckets, &arms, &points);
        let mut used = HashSet::new();
        for p in &pairs {
            prop_assert!(used.insert(p.stay) && used.insert(p.step));
            prop_assert_eq!(arms[p.stay], Arm::Stay);
            prop_assert_eq!(arms[p.step], Arm::Step);
            prop_assert_eq!(buckets.assignment[p.stay], p.bucket);
            prop_assert_eq!(buckets.assignment[p.step], p.bucket);
            prop_assert_eq!(p.distance, euclidean(&points[p.stay], &points[p.step]));
        }
        for b in 0..buckets.count() {
            let count = |arm| (0..arms.len()).filter(|&i| buckets.assignment[i] == b && arms[i] == arm).count();
            let made = pairs.iter().filter(|p| p.bucket == b).count();
            prop_assert_eq!(made, count(Arm::Stay).min(count(Arm::Step)));
        }
    }

    #[test]
    fn buckets_are_monotone_in_score((scores, _, _) in arb_pool(), k in 1usize..7) {
        let buckets = bucketize(&scores, k).unwrap();
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if scores[i] < scores[j] {
                    prop_assert!(buckets.assignment[i] <= buckets.assignment[j]);
                }
            }
        }
    }

    #[test]
    fn discarding_keeps_the_closest_pairs(
        distances in prop::collection::vec(0.0f64..5.0, 1..40),
        keep in 0.05f64..=1.0,
    ) {
        let visits: Vec<PatientVisit> = (0..2 * distances.len())
            .map(|i| PatientVisit { visit_id: format!("v{i:03}"), ..fixture_visit() })
            .collect();
        let pairs: Vec<Pair> = distances
            .iter()
            .enumerate()
            .map(|(i, &d)| Pair { stay: 2 * i, step: 2 * i + 1, distance: (d * 4.0).round() / 4.0, bucket: i % 3 })
            .collect();
        let kept = discard_least_similar(&pairs, &visits, keep).unwrap();
        prop_assert_eq!(kept.len(), (keep * pairs.len() as f64).ceil() as usize);
        let kept_ids: HashSet<usize> = kept.iter().map(|p| p.stay).collect();
        let max_kept = kept.iter().map(|p| p.distance).fold(f64::NEG_INFINITY, f64::max);
        for p in pairs.iter().filter(|p| !kept_ids.contains(&p.stay)) {
            prop_assert!(p.distance >= max_kept);
        }
        let again = discard_least_similar(&pairs, &visits, keep).unwrap();
        prop_assert_eq!(kept, again);
    }

    #[test]
    fn smd_is_symmetric_and_scale_free(
        values in prop::collection::vec(-10.0f64..10.0, 4..50),
        a in 0.1f64..10.0,
        b in -5.0f64..5.0,
    ) {
        let arms: Vec<Arm> = (0..values.len()).map(|i| if i % 2 == 0 { Arm::Stay } else { Arm::Step }).collect();
        let flipped: Vec<Arm> = arms.iter().map(|&x| if x == Arm::Stay { Arm::Step } else { Arm::Stay }).collect();
        let scaled: Vec<f64> = values.iter().map(|v| a * v + b).collect();
        let (s, _) = smd(&values, &arms);
        prop_assert!(s >= 0.0);
        prop_assert!((smd(&values, &flipped).0 - s).abs() < 1e-9);
        prop_assert!((smd(&scaled, &arms).0 - s).abs() < 1e-6 * (1.0 + s));
    }

    #[test]
    fn percentile_is_monotone_and_bounded(
        xs in prop::collection::vec(-100.0f64..100.0, 1..50),
        q1 in 0.0f64..=1.0,
        q2 in 0.0f64..=1.0,
    ) {
        let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
        let (a, b) = (percentile(&xs, lo).unwrap(), percentile(&xs, hi).unwrap());
        prop_assert!(a <= b);
        let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(min <= a && b <= max);
        prop_assert_eq!(percentile(&xs, 0.0).unwrap(), min);
        prop_assert_eq!(percentile(&xs, 1.0).unwrap(), max);
    }

    #[test]
    fn deeper_trees_never_score_worse(rm in arb_rewards(), alpha in 1.0f64..4.0) {
        let mut best = f64::NEG_INFINITY;
        for depth in 0..=2 {
            let cfg = TreeConfig { alpha, max_depth: depth, min_leaf: 2, ..TreeConfig::default() };
            let tree = train_tree(&rm, "p", &cfg).unwrap();
            tree.validate().unwrap();
            prop_assert!(tree.depth() <= depth);
            let j = objective(&tree, &rm, &cfg);
            prop_assert!(j >= best - 1e-9, "depth {} scored {} below {}", depth, j, best);
            best = j;
        }
    }

    #[test]
    fn trained_tree_beats_both_constant_policies(rm in arb_rewards(), alpha in 1.0f64..4.0, depth in 1usize..=3) {
        let cfg = TreeConfig { alpha, max_depth: depth, min_leaf: 2, ..TreeConfig::default() };
        let tree = train_tree(&rm, "p", &cfg).unwrap();
        let j = objective(&tree, &rm, &cfg);
        let (mut all_stay, mut all_step) = (0.0, 0.0);
        for row in &rm.rows {
            let (s, t) = cfg.weighted(row);
            all_stay += s;
            all_step += t;
        }
        prop_assert!(j >= all_stay.max(all_step) - 1e-9);
    }

    #[test]
    fn reference_traces_replay_to_the_recommendation(v in arb_visit()) {
        let set = reference_pipelines();
        let group = v.group().unwrap();
        let pipeline = set.get(group).unwrap();
        let rec = set.recommend(&v).unwrap();
        prop_assert!(group.admits(rec.regimen));
        prop_assert!(pipeline.reachable().contains(&rec.regimen));
        prop_assert_eq!(rec.trace.replay(pipeline), Some(rec.regimen));
        prop_assert_eq!(set.recommend(&v).unwrap(), rec);
    }
}

fn fixture_visit() -> PatientVisit {
    PatientVisit {
        visit_id: String::new(),
        age: 50.0,
        sex: "M".into(),
        race: "white".into(),
        kidney_contraindication: false,
        hba1c_last: 8.0,
        hba1c_p25: 7.0,
        hba1c_median: 7.5,
        hba1c_mean: 7.5,
        hba1c_p75: 8.0,
        bmi_last: 30.0,
        bmi_p25: 29.0,
        bmi_median: 30.0,
        bmi_mean: 30.0,
        bmi_p75: 31.0,
        current_regimen: Regimen::MetforminMono,
        prescribed_regimen: Regimen::MetforminMono,
        hba1c_after: 7.5,
    }
}
