mod support;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use support::trees::{
    gaussian_train_curve, mixed_table, numeric_table, routing_failures, split_oracle_failures,
    truncated, uninformative_nll, HALF_LN_2PI,
};
use treeflow::gbdt::{
    fit_gaussian_gbm, fit_multirmse_gbm, nll_gaussian, GaussianPrediction, GbmParams, Node,
    TreeEnsemble,
};
use treeflow::synth;
use treeflow::tabular::Cell;

#[test]
fn split_choice_matches_brute_force() {
    let failures = split_oracle_failures(200, 11);
    assert!(
        failures.is_empty(),
        "{} mismatches, first: {}",
        failures.len(),
        failures[0]
    );
}

#[test]
fn every_row_reaches_exactly_one_leaf() {
    let failures = routing_failures(10_000, 5);
    assert!(
        failures.is_empty(),
        "{} violations, first: {}",
        failures.len(),
        failures[0]
    );
}

#[test]
fn gaussian_train_nll_is_non_increasing() {
    let (curve, history) = gaussian_train_curve(21);
    assert!(curve.len() > 6);
    for (k, pair) in curve.windows(2).enumerate() {
        assert!(
            pair[1] <= pair[0] + 1e-12,
            "iteration {}: {} > {}",
            k + 1,
            pair[1],
            pair[0]
        );
    }
    for (k, (a, b)) in curve.iter().zip(&history).enumerate() {
        assert!(
            (a - b).abs() < 1e-9,
            "iteration {k}: recomputed {a}, recorded {b}"
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let train = mixed_table(400, &mut rng);
    let val = mixed_table(400, &mut rng);
    let model = fit_gaussian_gbm(
        &train,
        &val,
        &GbmParams {
            n_trees: 60,
            depth: 2,
            learning_rate: 0.1,
            ..GbmParams::default()
        },
    )
    .unwrap();
    let best = model.history.best_iteration;
    assert!(model.history.val_loss[best] <= *model.history.val_loss.last().unwrap());
    let val_nll = nll_gaussian(&model, &val).unwrap();
    assert!((val_nll - model.history.val_loss[best]).abs() < 1e-9);
}

#[test]
fn uninformative_features_give_standard_normal_entropy() {
    let nll = uninformative_nll(3);
    assert!((nll - (HALF_LN_2PI + 0.5)).abs() < 0.05, "{nll}");
}

#[test]
fn constant_targets_hit_the_sigma_clamp() {
    let cols = vec![(0..50).map(f64::from).collect()];
    let table = numeric_table(cols, vec![3.25; 50], 1);
    let model = fit_gaussian_gbm(
        &table,
        &table,
        &GbmParams {
            n_trees: 5,
            ..GbmParams::default()
        },
    )
    .unwrap();
    assert_eq!(model.base_prediction[0], 3.25);
    for tree in &model.trees {
        for node in &tree.nodes {
            if let Node::Leaf { value, .. } = node {
                assert!(value[0].abs() < 1e-12);
            }
        }
    }
    let floor = GaussianPrediction::from_raw(3.25, -10.0);
    assert_eq!(floor.sigma, (-10.0f64).exp());
    let nll = nll_gaussian(&model, &table).unwrap();
    assert!((nll - (HALF_LN_2PI - 10.0)).abs() < 1e-9, "{nll}");
}

#[test]
fn multirmse_constant_and_separable_targets() {
    let x1: Vec<f64> = (0..40).map(|i| f64::from(i % 2)).collect();
    let constant = numeric_table(vec![x1.clone()], [2.0, -1.0].repeat(40), 2);
    let m = fit_multirmse_gbm(
        &constant,
        &constant,
        &GbmParams {
            n_trees: 3,
            depth: 1,
            ..GbmParams::default()
        },
    )
    .unwrap();
    assert_eq!(m.base_prediction, vec![2.0, -1.0]);
    for tree in &m.trees {
        for node in &tree.nodes {
            if let Node::Leaf { value, .. } = node {
                assert!(value.iter().all(|v| v.abs() < 1e-12));
            }
        }
    }

    let y: Vec<f64> = x1.iter().flat_map(|&v| [v, -v]).collect();
    let sep = numeric_table(vec![x1], y, 2);
    let m = fit_multirmse_gbm(
        &sep,
        &sep,
        &GbmParams {
            n_trees: 1,
            depth: 1,
            learning_rate: 1.0,
            ..GbmParams::default()
        },
    )
    .unwrap();
    assert_eq!(m.n_trees(), 1);
    for v in [0.0, 1.0] {
        let pred = m.predict_raw(&[Cell::Numeric(v)]).unwrap();
        assert!(
            (pred[0] - v).abs() < 1e-12 && (pred[1] + v).abs() < 1e-12,
            "{pred:?}"
        );
    }
}

#[test]
fn multirmse_train_rmse_is_non_increasing() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut make = |n: usize| {
        let cols: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let mut y = Vec::new();
        for r in 0..n {
            for k in 0..3 {
                let noise: f64 = rng.sample(StandardNormal);
                y.push(cols[k][r] * cols[k + 1][r] + 0.5 * noise);
            }
        }
        numeric_table(cols, y, 3)
    };
    let (train, val) = (make(200), make(200));
    let m = fit_multirmse_gbm(
        &train,
        &val,
        &GbmParams {
            n_trees: 40,
            depth: 2,
            ..GbmParams::default()
        },
    )
    .unwrap();
    let rmse = |e: &TreeEnsemble| -> f64 {
        let mut sq = 0.0;
        for r in 0..train.n_rows() {
            let pred = e.predict_raw(&train.row(r)).unwrap();
            sq += pred
                .iter()
                .zip(train.target_row(r))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        (sq / (train.n_rows() * 3) as f64).sqrt()
    };
    let mut prev = f64::INFINITY;
    for k in 0..=m.n_trees() {
        let v = rmse(&truncated(&m, k));
        assert!(v <= prev + 1e-12, "iteration {k}: {v} > {prev}");
        prev = v;
    }
}

#[test]
fn synthetic_benchmark_baseline() {
    let train = synth::sample_dataset(5000, 1).unwrap();
    let val = synth::sample_dataset(1000, 2).unwrap();
    let test = synth::sample_dataset(20_000, 3).unwrap();
    let model = fit_gaussian_gbm(&train, &val, &GbmParams::default()).unwrap();

    let p = model.predict_gaussian(&synth::cell_row(0, 0)).unwrap();
    assert!(p.mu.abs() < 0.1 && (p.sigma - 1.0).abs() < 0.1, "{p:?}");
    let nll = nll_gaussian(&model, &test).unwrap();
    assert!((nll - 2.52).abs() < 0.05, "{nll}");

    let occ = model.leaf_occurrence(&synth::cell_row(1, 1)).unwrap();
    assert!(occ.dim <= 4 * model.n_trees());
    assert_eq!(occ.active.len(), model.n_trees());
    assert_eq!(occ, model.leaf_occurrence(&synth::cell_row(1, 1)).unwrap());
}

#[test]
fn ensemble_json_round_trip_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let train = mixed_table(300, &mut rng);
    let model = fit_gaussian_gbm(
        &train,
        &train,
        &GbmParams {
            n_trees: 10,
            ..GbmParams::default()
        },
    )
    .unwrap();
    let back = TreeEnsemble::from_json(&model.to_json().unwrap()).unwrap();
    assert_eq!(back, model);
    for r in 0..train.n_rows() {
        let row = train.row(r);
        assert_eq!(
            back.predict_raw(&row).unwrap(),
            model.predict_raw(&row).unwrap()
        );
    }
}
