use std::collections::BTreeSet;

use proptest::prelude::*;
use regression_markets::data::{ingest_reader, make_lags, schema_for, write_csv, LagSpec};
use regression_markets::design::{coalition_design, polynomial_expand};
use regression_markets::{Coalition, Dataset, Series};

fn dataset(cols: &[Vec<f64>]) -> Dataset {
    let feats = cols[1..]
        .iter()
        .enumerate()
        .map(|(j, v)| Series::new(format!("x{}", j + 2), format!("a{}", j + 2), v.clone()))
        .collect();
    Dataset::indexed(Series::new("y", "a1", cols[0].clone()), feats).unwrap()
}

fn columns(k: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..40).prop_flat_map(move |t| prop::collection::vec(prop::collection::vec(-1e6f64..1e6, t), k + 1))
}

fn binomial(n: usize, r: usize) -> usize {
    (0..r).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

#[test]
fn polynomial_term_count_is_binomial() {
    for k in 1..=4 {
        let cols: Vec<Vec<f64>> = (0..=k).map(|j| vec![j as f64, 1.0, 2.0]).collect();
        let ds = dataset(&cols);
        for d in 1..=3 {
            let design = polynomial_expand(&ds, d, true).unwrap();
            assert_eq!(design.n_terms(), binomial(k + d as usize, d as usize), "k {k} d {d}");
        }
    }
}

#[test]
fn coalition_designs_nest() {
    let cols: Vec<Vec<f64>> = (0..4).map(|j| (0..6).map(|i| (i * j) as f64 + 0.5).collect()).collect();
    let ds = dataset(&cols).reassign("x2", "a1".into()).unwrap();
    let design = polynomial_expand(&ds, 2, true).unwrap();
    let central = BTreeSet::from(["x2".to_string()]);
    let players = ["x3", "x4"];
    let mut coalitions = Vec::new();
    for mask in 0..4usize {
        let mut c = Coalition::empty();
        for (i, p) in players.iter().enumerate() {
            if mask >> i & 1 == 1 {
                c = c.with(p);
            }
        }
        coalitions.push((mask, coalition_design(&design, &central, &c).unwrap().term_names()));
    }
    for (m, terms) in &coalitions {
        for (m2, terms2) in &coalitions {
            if m & m2 == *m {
                assert!(terms.iter().all(|t| terms2.contains(t)), "{m} not inside {m2}");
            }
        }
    }
    let empty = coalition_design(&design, &central, &Coalition::empty()).unwrap();
    assert!(empty.terms().iter().all(|t| t.support.iter().all(|f| f == "x2")));
    assert_eq!(coalitions[3].1, design.term_names());
}

#[test]
fn lags_then_linear_expansion_give_arx_terms() {
    let cols: Vec<Vec<f64>> = (0..4).map(|j| (0..10).map(|i| (10 * j + i) as f64).collect()).collect();
    let ds = dataset(&cols);
    let lags: LagSpec = ["y", "x2", "x3", "x4"]
        .iter()
        .map(|s| (s.to_string(), vec![1]))
        .collect();
    let lagged = make_lags(&ds, &lags).unwrap();
    let lagged = lagged
        .select_features(&["y_lag1", "x2_lag1", "x3_lag1", "x4_lag1"])
        .unwrap();
    let design = polynomial_expand(&lagged, 1, false).unwrap();
    assert_eq!(
        design.term_names(),
        vec!["1", "y_lag1", "x2_lag1", "x3_lag1", "x4_lag1"]
    );
    for r in 0..design.n_rows() {
        assert_eq!(design.values()[(r, 1)], r as f64);
        assert_eq!(design.values()[(r, 3)], (20 + r) as f64);
    }
}

proptest! {
    #[test]
    fn csv_round_trip(cols in columns(2)) {
        let ds = dataset(&cols);
        let mut first = Vec::new();
        write_csv(&ds, &mut first).unwrap();
        let back = ingest_reader(first.as_slice(), &schema_for(&ds)).unwrap();
        let mut second = Vec::new();
        write_csv(&back, &mut second).unwrap();
        prop_assert_eq!(&first, &second);
        prop_assert_eq!(back.target().values.clone(), cols[0].clone());
        prop_assert_eq!(back.features()[1].values.clone(), cols[2].clone());
    }

    #[test]
    fn lags_shift_and_trim(cols in columns(1), lag in 1usize..5) {
        let t = cols[0].len();
        let ds = dataset(&cols);
        let spec = LagSpec::from([("y".to_string(), vec![lag]), ("x2".to_string(), vec![1])]);
        match make_lags(&ds, &spec) {
            Ok(out) => {
                prop_assert_eq!(out.len(), t - lag);
                let lagged = &out.feature(&format!("y_lag{lag}")).unwrap().values;
                for r in 0..out.len() {
                    prop_assert_eq!(lagged[r], cols[0][r]);
                    prop_assert_eq!(out.target().values[r], cols[0][r + lag]);
                }
                prop_assert_eq!(out.owner_of("x2_lag1").unwrap().as_str(), "a2");
            }
            Err(_) => prop_assert!(t <= lag),
        }
    }
}
