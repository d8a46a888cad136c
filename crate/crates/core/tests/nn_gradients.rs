mod common;

use common::{arch, max_fd_error, random_classification_data, random_params, random_regression_data};
use fedpred::data::Dataset;
use fedpred::nn::{forward, neg_log_posterior_grad, LikelihoodSpec, Targets, Task};
use fedpred::sampler::{sgd_train, SgdConfig};
use ndarray::Array2;
use proptest::prelude::*;

#[test]
fn finite_differences_small_regression_net() {
    let a = arch(&[2, 5, 1], Task::Regression);
    let data = random_regression_data(12, 2, 1, 1);
    let p = random_params(&a, 2, 1.0);
    assert!(max_fd_error(&p, &data, 10, 3) < 1e-4);
}

#[test]
fn finite_differences_both_tasks_five_seeds() {
    for seed in 0..5 {
        let reg = arch(&[3, 5, 2], Task::Regression);
        let data = random_regression_data(16, 3, 2, 100 + seed);
        let err = max_fd_error(&random_params(&reg, 200 + seed, 1.0), &data, 20, seed);
        assert!(err < 1e-4, "regression seed {seed}: {err:e}");

        let cls = arch(&[4, 5, 3], Task::Classification);
        let data = random_classification_data(16, 4, 3, 300 + seed);
        let err = max_fd_error(&random_params(&cls, 400 + seed, 1.0), &data, 20, seed);
        assert!(err < 1e-4, "classification seed {seed}: {err:e}");
    }
}

#[test]
fn batched_forward_matches_rows() {
    let a = arch(&[4, 7, 3], Task::Classification);
    let p = random_params(&a, 9, 1.0);
    let data = random_classification_data(20, 4, 3, 10);
    let all = forward(&p, data.features.view()).unwrap();
    for i in 0..data.len() {
        let row = forward(&p, data.features.slice(ndarray::s![i..i + 1, ..])).unwrap();
        for k in 0..3 {
            assert!((row[[0, k]] - all[[i, k]]).abs() <= 1e-12);
        }
    }
}

#[test]
fn full_batch_value_ignores_row_order() {
    let a = arch(&[2, 5, 1], Task::Regression);
    let p = random_params(&a, 5, 1.0);
    let data = random_regression_data(10, 2, 1, 6);
    let lik = LikelihoodSpec::default();
    let (v1, g1) = neg_log_posterior_grad(&p, &data.full_batch(), &lik, 10).unwrap();
    let reversed: Vec<usize> = (0..10).rev().collect();
    let (v2, g2) = neg_log_posterior_grad(&p, &data.batch(&reversed), &lik, 10).unwrap();
    assert!((v1 - v2).abs() <= 1e-12 * v1.abs());
    for (a, b) in g1.iter().zip(&g2) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
    }
}

#[test]
fn prior_dominated_minimizer_shrinks_to_zero() {
    let a = arch(&[2, 5, 1], Task::Regression);
    let x = Array2::from_shape_vec((8, 2), [0.5, -1.0].repeat(8)).unwrap();
    let y = Array2::from_elem((8, 1), 2.0);
    let data = Dataset::new("repeated", x, Targets::Continuous(y)).unwrap();
    let start = random_params(&a, 11, 1.0);
    let mut norms = Vec::new();
    for prior_variance in [1e-1, 1e-2, 1e-4] {
        let lik = LikelihoodSpec::new(0.1, prior_variance).unwrap();
        // Keep lr · curvature fixed as the prior sharpens.
        let cfg = SgdConfig {
            learning_rate: 0.1 * prior_variance * data.len() as f64 / 8.0,
            momentum: 0.0,
            epochs: 3000,
            batch_size: 8,
            seed: 0,
        };
        let w = sgd_train(&start, &data, &lik, &cfg).unwrap();
        norms.push(w.values().iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    assert!(norms[0] > norms[1] && norms[1] > norms[2], "{norms:?}");
    assert!(norms[2] < 0.1, "{norms:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gradient_matches_differences_for_random_shapes(
        d in 1usize..5,
        out in 1usize..4,
        classification in any::<bool>(),
        seed in 0u64..1000,
    ) {
        let (a, data) = if classification {
            let k = out + 1;
            (arch(&[d, 5, k], Task::Classification), random_classification_data(9, d, k, seed))
        } else {
            (arch(&[d, 5, out], Task::Regression), random_regression_data(9, d, out, seed))
        };
        let p = random_params(&a, seed ^ 0xabc, 1.0);
        prop_assert!(max_fd_error(&p, &data, 8, seed) < 1e-4);
    }
}
