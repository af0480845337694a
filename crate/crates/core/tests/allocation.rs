#![allow(clippy::needless_range_loop)]

mod common;

use std::collections::BTreeMap;

use common::{permutation_shapley, players, random_table};
use proptest::prelude::*;
use regression_markets::allocation::{
    instant_allocation, loo_allocation, online_allocation_update, shapley_allocation, shapley_contributions,
    shapley_montecarlo_table,
};
use regression_markets::market::{run_market, Mechanism};
use regression_markets::simulation::{generate, CaseId, ScenarioSpec};
use regression_markets::task::TaskSpec;
use regression_markets::{AllocationPolicy, AllocationVector, CoalitionLossTable, LooVariant, ShapleyVariant};

#[test]
fn exact_shapley_equals_permutation_average_for_four_features() {
    for seed in 0..10 {
        let t = random_table(4, seed);
        let exact = shapley_contributions(&t, ShapleyVariant::Original).unwrap();
        for (a, b) in exact.contributions.iter().zip(permutation_shapley(&t)) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn symmetric_pair_montecarlo_is_exact() {
    let t = CoalitionLossTable::from_masks(&players(2), |m| [1.0, 0.5, 0.5, 0.0][m]).unwrap();
    for seed in 0..5 {
        let mc = shapley_montecarlo_table(&t, 7, seed).unwrap();
        assert_eq!(mc.shares, vec![0.5, 0.5]);
    }
}

#[test]
fn montecarlo_enumerates_when_samples_cover_all_orders() {
    let t = random_table(4, 3);
    let mc = shapley_montecarlo_table(&t, 24, 9).unwrap();
    let exact = shapley_allocation(&t, ShapleyVariant::Original).unwrap();
    for (a, b) in mc.shares.iter().zip(&exact.shares) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn coverage(k: usize, samples: usize) -> (usize, usize) {
    let mut within = 0;
    let mut total = 0;
    for seed in 0..20 {
        let t = random_table(k, 100 + seed);
        let exact = shapley_allocation(&t, ShapleyVariant::Original).unwrap();
        let mc = shapley_montecarlo_table(&t, samples, seed).unwrap();
        let se = mc.std_errors.clone().expect("standard errors reported");
        for i in 0..k {
            total += 1;
            if (mc.shares[i] - exact.shares[i]).abs() <= 3.0 * se[i] + 1e-12 {
                within += 1;
            }
        }
    }
    (within, total)
}

#[test]
fn montecarlo_within_three_standard_errors() {
    // 2000 samples cover all 5! orders, so the estimate is exact
    let (within, total) = coverage(5, 2000);
    assert_eq!(within, total);
    // sampled paths; 3 standard errors cover about 99.7% of estimates
    for (k, samples) in [(5, 60), (7, 2000)] {
        let (within, total) = coverage(k, samples);
        assert!(within as f64 >= 0.95 * total as f64, "k {k}: {within}/{total}");
    }
}

#[test]
fn instant_three_feature_table_matches_brute_force() {
    let t = random_table(3, 77);
    let a = instant_allocation(&t, ShapleyVariant::Original).unwrap();
    for (x, y) in a.contributions.iter().zip(permutation_shapley(&t)) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn single_support_feature_takes_the_whole_surplus() {
    let t = CoalitionLossTable::from_masks(&players(1), |m| [0.4, 0.1][m]).unwrap();
    for v in [LooVariant::DropOne, LooVariant::AddOne] {
        assert!((loo_allocation(&t, v).unwrap().shares[0] - 1.0).abs() < 1e-15);
    }
    assert!((instant_allocation(&t, ShapleyVariant::Original).unwrap().shares[0] - 1.0).abs() < 1e-15);
}

#[test]
fn online_update_converges_geometrically() {
    let f = players(2);
    let target = AllocationVector::new(AllocationPolicy::Shapley, f.clone(), vec![0.3, 0.1], 0.4);
    let mut psi = AllocationVector::new(AllocationPolicy::Shapley, f, vec![0.0, 1.0], 1.0);
    let lambda: f64 = 0.9;
    for step in 1..=50 {
        psi = online_allocation_update(&psi, &target, lambda).unwrap();
        let gap = (psi.contributions[1] - 0.1).abs();
        assert!((gap - 0.9 * lambda.powi(step)).abs() < 1e-12);
    }
}

fn case1_allocation(policy: AllocationPolicy) -> AllocationVector {
    let (ds, _) = generate(&ScenarioSpec::new(CaseId::BatchLinear)).unwrap();
    let task = TaskSpec {
        policy,
        ..TaskSpec::default()
    };
    run_market(&ds, &task, Mechanism::Batch).unwrap().allocation.unwrap()
}

#[test]
fn case1_leave_one_out_shares_match_table() {
    let published = [0.227, 0.734, 0.039];
    for policy in [
        AllocationPolicy::LooA,
        AllocationPolicy::LooB,
        AllocationPolicy::Shapley,
    ] {
        let a = case1_allocation(policy);
        for (s, p) in a.shares.iter().zip(published) {
            assert!((s - p).abs() <= 0.02, "{policy:?}: {:?}", a.shares);
        }
    }
}

#[test]
fn variance_shares_for_case1_truth() {
    let coef: BTreeMap<String, f64> = [("x2", -0.5), ("x3", 0.9), ("x4", -0.2)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    let var: BTreeMap<String, f64> = coef.keys().map(|k| (k.clone(), 1.0)).collect();
    let a = regression_markets::allocation::loo_variance_allocation(&coef, &var).unwrap();
    let expected = [0.25 / 1.1, 0.81 / 1.1, 0.04 / 1.1];
    for (s, e) in a.shares.iter().zip(expected) {
        assert!((s - e).abs() < 1e-12);
    }
}

#[test]
fn case3_low_quantile_x2_share() {
    let (ds, _) = generate(&ScenarioSpec::new(CaseId::BatchArxQuantile)).unwrap();
    let task = TaskSpec {
        model: regression_markets::task::ModelSpec {
            inputs: Some(vec!["x2".into(), "x3".into(), "x4".into()]),
            target_lags: vec![1],
            feature_lags: vec![1],
            ..regression_markets::task::ModelSpec::linear()
        },
        loss: regression_markets::LossSpec::smooth_quantile(0.1, 0.02).unwrap(),
        phi_insample: 1.0,
        ..TaskSpec::default()
    };
    let r = run_market(&ds, &task, Mechanism::Batch).unwrap();
    let s = r.share("x2_lag1").unwrap();
    assert!((s - 0.66).abs() <= 0.05, "{s}");
}

fn table_strategy(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..2.0, 1usize << k)
}

proptest! {
    #[test]
    fn exact_shapley_matches_permutations(k in 1usize..=6, seed in any::<u64>()) {
        let t = random_table(k, seed);
        let exact = shapley_contributions(&t, ShapleyVariant::Original).unwrap();
        for (a, b) in exact.contributions.iter().zip(permutation_shapley(&t)) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn shapley_is_efficient_and_linear(a in table_strategy(3), b in table_strategy(3), w in 0.0f64..3.0) {
        let ta = CoalitionLossTable::from_masks(&players(3), |m| a[m]).unwrap();
        let tb = CoalitionLossTable::from_masks(&players(3), |m| b[m]).unwrap();
        let tc = CoalitionLossTable::from_masks(&players(3), |m| a[m] + w * b[m]).unwrap();
        let sa = shapley_contributions(&ta, ShapleyVariant::Original).unwrap();
        let sb = shapley_contributions(&tb, ShapleyVariant::Original).unwrap();
        let sc = shapley_contributions(&tc, ShapleyVariant::Original).unwrap();
        let sum: f64 = sa.contributions.iter().sum();
        prop_assert!((sum - (a[0] - a[7])).abs() < 1e-12);
        for k in 0..3 {
            let lin = sa.contributions[k] + w * sb.contributions[k];
            prop_assert!((sc.contributions[k] - lin).abs() < 1e-11);
        }
    }

    #[test]
    fn clamped_variants_are_non_negative(a in table_strategy(3)) {
        let t = CoalitionLossTable::from_masks(&players(3), |m| a[m]).unwrap();
        for v in [ShapleyVariant::Zero, ShapleyVariant::Absolute] {
            let s = shapley_contributions(&t, v).unwrap();
            prop_assert!(s.contributions.iter().all(|c| *c >= 0.0));
        }
    }
}
