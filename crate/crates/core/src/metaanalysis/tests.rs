use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::corpus::SplitTask;

fn record(country: &str, method: Method, domain: SpecDomain, base: BaseModel, subset: Subset) -> ResultRecord {
    ResultRecord {
        country: country.into(),
        language: String::new(),
        task: Task::Sa,
        dataset: SplitTask::Sa,
        method,
        dimension: Dimension::Gender,
        base_model: base,
        spec_domain: domain,
        subset,
        seed: 0,
        f1: 0.5,
        accuracy: 0.5,
        n_test: 10,
        corpus_digest: "d".into(),
        cell: String::new(),
    }
}

fn countries() -> Vec<String> {
    ["Denmark", "France", "Germany", "UK", "US"].iter().map(|s| s.to_string()).collect()
}

/// Every combination of the five groups, once.
fn full_design() -> Vec<ResultRecord> {
    let mut out = Vec::new();
    for c in countries() {
        for m in Method::SPECIALIZED {
            for d in [SpecDomain::InDomain, SpecDomain::OutOfDomain] {
                for b in [BaseModel::Monolingual, BaseModel::Multilingual] {
                    for s in Subset::ALL {
                        out.push(record(&c, m, d, b, s));
                    }
                }
            }
        }
    }
    out
}

fn design_matrix(space: &FeatureSpace, recs: &[ResultRecord]) -> Vec<Vec<f64>> {
    recs.iter().map(|r| build_features(space, r).unwrap()).collect()
}

fn predict(x: &[Vec<f64>], w: &[f64]) -> Vec<f64> {
    x.iter().map(|r| r.iter().zip(w).map(|(a, b)| a * b).sum()).collect()
}

#[test]
fn one_indicator_per_group_plus_intercept() {
    let space = FeatureSpace::new(countries());
    let x = build_features(&space, &record("Denmark", Method::DsTok, SpecDomain::InDomain, BaseModel::Multilingual, Subset::Mixed)).unwrap();
    assert_eq!(x[0], 1.0);
    assert_eq!(x.iter().filter(|&&v| v == 1.0).count(), 6);
    for g in FeatureGroup::ALL {
        assert_eq!(space.columns(g).iter().filter(|&&j| x[j] == 1.0).count(), 1, "{g}");
    }
}

#[test]
fn method_change_touches_only_method_columns() {
    let space = FeatureSpace::new(countries());
    let a = build_features(&space, &record("UK", Method::Mlm, SpecDomain::InDomain, BaseModel::Multilingual, Subset::ClassA)).unwrap();
    let b = build_features(&space, &record("UK", Method::DsSeq, SpecDomain::InDomain, BaseModel::Multilingual, Subset::ClassA)).unwrap();
    let method_cols = space.columns(FeatureGroup::Approach);
    for j in 0..a.len() {
        if a[j] != b[j] {
            assert!(method_cols.contains(&j));
        }
    }
    assert_ne!(a, b);
}

#[test]
fn unknown_category_is_fatal() {
    let space = FeatureSpace::new(countries());
    let r = record("Atlantis", Method::Mlm, SpecDomain::InDomain, BaseModel::Multilingual, Subset::Mixed);
    assert!(matches!(build_features(&space, &r), Err(Error::UnknownCategory { .. })));
    let vanilla = record("UK", Method::Vanilla, SpecDomain::None, BaseModel::Multilingual, Subset::Mixed);
    assert!(build_features(&space, &vanilla).is_err());
}

#[test]
fn group_codes_parse() {
    assert_eq!("-A".parse::<FeatureGroup>().unwrap(), FeatureGroup::Approach);
    assert_eq!("C".parse::<FeatureGroup>().unwrap(), FeatureGroup::Country);
    assert!("-Z".parse::<FeatureGroup>().is_err());
}

#[test]
fn noiseless_linear_target_is_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<Vec<f64>> = (0..50).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let y: Vec<f64> = x.iter().map(|r| 2.0 * r[1] - r[2]).collect();
    let (w, rmse) = fit_regression(&x, &y).unwrap();
    assert!(rmse <= 1e-8, "{rmse}");
    assert!((w[1] - 2.0).abs() < 1e-8 && (w[2] + 1.0).abs() < 1e-8);
}

#[test]
fn constant_target_goes_to_intercept() {
    let space = FeatureSpace::new(countries());
    let x: Vec<Vec<f64>> = (0..20).map(|i| { let mut r = vec![0.0; 3]; r[0] = 1.0; r[1] = i as f64; r }).collect();
    let y = vec![1.7; 20];
    let (w, rmse) = fit_regression(&x, &y).unwrap();
    assert!(rmse < 1e-12);
    assert!((w[0] - 1.7).abs() < 1e-10);
    // collinear one-hot design: predictions still exact
    let recs = full_design();
    let xd = design_matrix(&space, &recs);
    let (_, rmse) = fit_regression(&xd, &vec![1.7; recs.len()]).unwrap();
    assert!(rmse < 1e-10);
}

#[test]
fn empty_or_ragged_input_is_fatal() {
    assert!(fit_regression(&[], &[]).is_err());
    assert!(fit_regression(&[vec![1.0], vec![1.0, 2.0]], &[1.0, 2.0]).is_err());
    assert!(fit_regression(&[vec![1.0]], &[f64::NAN]).is_err());
}

#[test]
fn noise_level_is_recovered_by_rmse() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let noise = Normal::new(0.0, 0.1).unwrap();
    let beta = [0.5, -1.0, 2.0, 0.25, 1.5];
    let x: Vec<Vec<f64>> =
        (0..10_000).map(|_| std::iter::once(1.0).chain((0..4).map(|_| rng.gen_range(-1.0..1.0))).collect()).collect();
    let y: Vec<f64> = x.iter().map(|r| r.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>() + noise.sample(&mut rng)).collect();
    let (_, rmse) = fit_regression(&x, &y).unwrap();
    assert!((rmse - 0.1).abs() <= 0.01, "{rmse}");
}

#[test]
fn zero_weight_group_ablation_leaves_rmse() {
    let space = FeatureSpace::new(countries());
    let recs = full_design();
    let x = design_matrix(&space, &recs);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let effects: Vec<f64> = (0..space.width()).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let subset_cols = space.columns(FeatureGroup::Subset);
    let y: Vec<f64> = x
        .iter()
        .map(|r| {
            r.iter().enumerate().filter(|(j, _)| !subset_cols.contains(j)).map(|(j, v)| v * effects[j]).sum::<f64>()
                + rng.gen_range(-0.1..0.1)
        })
        .collect();
    let full = fit_regression(&x, &y).unwrap().1;
    let ablated = ablate(&space, &x, &y, FeatureGroup::Subset).unwrap();
    // the noise has a small subset component, so allow the fitted one
    assert!(ablated >= full - 1e-12);
    let noiseless: Vec<f64> = predict(&x, &effects.iter().enumerate().map(|(j, e)| if subset_cols.contains(&j) { 0.0 } else { *e }).collect::<Vec<_>>());
    let full = fit_regression(&x, &noiseless).unwrap().1;
    let ablated = ablate(&space, &x, &noiseless, FeatureGroup::Subset).unwrap();
    assert!((ablated - full).abs() <= 1e-8);
}

#[test]
fn country_driven_target_needs_country() {
    let space = FeatureSpace::new(countries());
    let recs = full_design();
    let x = design_matrix(&space, &recs);
    let effect = [3.0, -1.0, 0.5, 2.0, -2.5];
    let y: Vec<f64> = recs.iter().map(|r| effect[countries().iter().position(|c| *c == r.country).unwrap()]).collect();
    let fit = analyze(&space, &x, &y).unwrap();
    assert!(fit.rmse < 1e-8);
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let std = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / y.len() as f64).sqrt();
    assert!((fit.ablation[&FeatureGroup::Country] - std).abs() < 1e-8);
    for g in FeatureGroup::ALL.into_iter().filter(|g| *g != FeatureGroup::Country) {
        assert!(fit.ablation[&g] < 1e-8);
    }
}

#[test]
fn method_driven_target_makes_approach_ablation_largest() {
    let space = FeatureSpace::new(countries());
    let recs = full_design();
    let x = design_matrix(&space, &recs);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let y: Vec<f64> = recs
        .iter()
        .map(|r| {
            let m = match r.method {
                Method::Mlm => 1.0,
                Method::DsSeq => -0.5,
                _ => 0.0,
            };
            m + rng.gen_range(-0.05..0.05)
        })
        .collect();
    let fit = analyze(&space, &x, &y).unwrap();
    let worst = fit.ablation.iter().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
    assert_eq!(*worst.0, FeatureGroup::Approach);
}

#[test]
fn selection_threshold_and_tie_break() {
    let fit = RegressionFit {
        names: vec!["c".into(), "b".into(), "a".into(), "d".into()],
        weights: vec![0.4, 0.9, 1.0, 0.9],
        rmse: 0.0,
        ablation: BTreeMap::new(),
    };
    let sel: Vec<String> = select_important(&fit, 0.5).into_iter().map(|(n, _)| n).collect();
    assert_eq!(sel, ["a", "b", "d"]);
    let low = RegressionFit { weights: vec![0.5, 0.1, -3.0, 0.0], ..fit };
    assert!(select_important(&low, 0.5).is_empty());
}

#[test]
fn meta_analysis_pairs_with_vanilla() {
    let mut recs = Vec::new();
    for c in countries() {
        for b in [BaseModel::Monolingual, BaseModel::Multilingual] {
            for s in Subset::ALL {
                recs.push(ResultRecord { f1: 0.6, ..record(&c, Method::Vanilla, SpecDomain::None, b, s) });
                for m in Method::SPECIALIZED {
                    for d in [SpecDomain::InDomain, SpecDomain::OutOfDomain] {
                        let gain = if d == SpecDomain::InDomain { 0.02 } else { 0.0 };
                        recs.push(ResultRecord { f1: 0.6 + gain, ..record(&c, m, d, b, s) });
                    }
                }
            }
        }
    }
    let rows = meta_analysis(&recs, 0.5).unwrap();
    assert_eq!(rows.len(), 1);
    let row = &rows[0];
    assert_eq!(row.n, 5 * 2 * 3 * 3 * 2);
    assert!(row.fit.rmse < 1e-8);
    assert!(row.fit.ablation[&FeatureGroup::Domain] > 0.9);
    assert!(row.important.iter().any(|(n, _)| n == "domain=in-domain"));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("meta.tsv");
    write_meta_tsv(&path, &rows).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    assert!(text.starts_with("task\tdimension\tn\tall\t-D\t-M\t-S\t-C\t-A\tselected"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fit_is_invariant_to_row_order_and_duplication(seed in 0u64..1000) {
        let space = FeatureSpace::new(countries());
        let recs = full_design();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<f64> = recs.iter().map(|_| rng.gen_range(-3.0..3.0)).collect();
        let x = design_matrix(&space, &recs);
        let (w, rmse) = fit_regression(&x, &y).unwrap();
        let base_pred = predict(&x, &w);

        let mut order: Vec<usize> = (0..recs.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let xs: Vec<Vec<f64>> = order.iter().map(|&i| x[i].clone()).collect();
        let ys: Vec<f64> = order.iter().map(|&i| y[i]).collect();
        let (w2, rmse2) = fit_regression(&xs, &ys).unwrap();
        prop_assert!((rmse - rmse2).abs() < 1e-9);
        for (a, b) in predict(&x, &w2).iter().zip(&base_pred) {
            prop_assert!((a - b).abs() < 1e-8);
        }

        let xd: Vec<Vec<f64>> = x.iter().chain(&x).cloned().collect();
        let yd: Vec<f64> = y.iter().chain(&y).copied().collect();
        let (w3, rmse3) = fit_regression(&xd, &yd).unwrap();
        prop_assert!((rmse - rmse3).abs() < 1e-9);
        for (a, b) in predict(&x, &w3).iter().zip(&base_pred) {
            prop_assert!((a - b).abs() < 1e-8);
        }

        for g in FeatureGroup::ALL {
            prop_assert!(ablate(&space, &x, &y, g).unwrap() >= rmse - 1e-12);
        }
    }

    #[test]
    fn predictions_do_not_depend_on_dropped_reference(seed in 0u64..1000, group in 0usize..5) {
        let space = FeatureSpace::new(countries());
        let recs = full_design();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<f64> = recs.iter().map(|_| rng.gen_range(-3.0..3.0)).collect();
        let x = design_matrix(&space, &recs);
        let (w, _) = fit_regression(&x, &y).unwrap();
        let full = predict(&x, &w);
        let cols = space.columns(FeatureGroup::ALL[group]);
        for &drop in &cols {
            let reduced: Vec<Vec<f64>> = x.iter().map(|r| r.iter().enumerate().filter(|(j, _)| *j != drop).map(|(_, v)| *v).collect()).collect();
            let (wr, _) = fit_regression(&reduced, &y).unwrap();
            for (a, b) in predict(&reduced, &wr).iter().zip(&full) {
                prop_assert!((a - b).abs() < 1e-8);
            }
        }
    }
}
