//! Fixtures and independent oracles shared by the integration tests and the
//! acceptance runner. The oracles (`conjugate_line_posterior`,
//! `quadrature_product`, `direct_product`) never call into the crate.

#![allow(dead_code)]

use std::sync::Arc;

use fedpred::data::Dataset;
use fedpred::nn::{neg_log_posterior_grad, Architecture, LikelihoodSpec, ModelParams, Targets, Task};
use fedpred::sampler::{csghmc_sample, CsghmcConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Posterior of `y = a·x + b + ε`, `ε ~ N(0, noise)`, prior `N(0, prior·I)`,
/// over `(a, b)`. Returns the mean and covariance.
pub fn conjugate_line_posterior(xs: &[f64], ys: &[f64], noise: f64, prior: f64) -> ([f64; 2], [[f64; 2]; 2]) {
    let n = xs.len() as f64;
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sx: f64 = xs.iter().sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let sy: f64 = ys.iter().sum();
    let a = [
        [sxx / noise + 1.0 / prior, sx / noise],
        [sx / noise, n / noise + 1.0 / prior],
    ];
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let cov = [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]];
    let rhs = [sxy / noise, sy / noise];
    let mean = [
        cov[0][0] * rhs[0] + cov[0][1] * rhs[1],
        cov[1][0] * rhs[0] + cov[1][1] * rhs[1],
    ];
    (mean, cov)
}

/// Mean and variance of the normalized density
/// `Π N(y; μ_i, σ_i²) / N(y; μ_p, σ_p²)^(n-1)` by trapezoidal quadrature.
pub fn quadrature_product(mus: &[f64], vars: &[f64], mu_p: f64, var_p: f64) -> (f64, f64) {
    let n = mus.len() as f64;
    let log_density = |y: f64| -> f64 {
        let mut s = 0.0;
        for (m, v) in mus.iter().zip(vars) {
            s += -0.5 * (y - m).powi(2) / v - 0.5 * (2.0 * std::f64::consts::PI * v).ln();
        }
        s - (n - 1.0) * (-0.5 * (y - mu_p).powi(2) / var_p - 0.5 * (2.0 * std::f64::consts::PI * var_p).ln())
    };
    // Coarse scan to find the bulk, then a fine grid around it.
    let lo = mus.iter().cloned().fold(f64::INFINITY, f64::min) - 50.0;
    let hi = mus.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 50.0;
    let coarse = 20_001;
    let mut best = (f64::NEG_INFINITY, 0.0);
    for k in 0..coarse {
        let y = lo + (hi - lo) * k as f64 / (coarse - 1) as f64;
        let l = log_density(y);
        if l > best.0 {
            best = (l, y);
        }
    }
    let max_var = vars.iter().cloned().fold(0.0, f64::max);
    let width = 30.0 * max_var.sqrt();
    let (a, b) = (best.1 - width, best.1 + width);
    let m = 400_001;
    let h = (b - a) / (m - 1) as f64;
    let (mut z, mut s1, mut s2) = (0.0, 0.0, 0.0);
    for k in 0..m {
        let y = a + h * k as f64;
        let w = if k == 0 || k == m - 1 { 0.5 } else { 1.0 };
        let p = (log_density(y) - best.0).exp() * w;
        z += p;
        s1 += p * y;
        s2 += p * y * y;
    }
    let mean = s1 / z;
    (mean, s2 / z - mean * mean)
}

/// `Π p_i / prior^(n-1)`, normalized, computed directly in linear space.
pub fn direct_product(locals: &[Vec<f64>], prior: &[f64]) -> Vec<f64> {
    let n = locals.len() as i32;
    let mut out: Vec<f64> = (0..prior.len())
        .map(|k| locals.iter().map(|p| p[k]).product::<f64>() / prior[k].powi(n - 1))
        .collect();
    let z: f64 = out.iter().sum();
    for v in &mut out {
        *v /= z;
    }
    out
}

pub fn relative_error(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(f64::MIN_POSITIVE)
}

/// Random parameters in `[-scale, scale]`.
pub fn random_params(arch: &Arc<Architecture>, seed: u64, scale: f64) -> ModelParams {
    let mut r = rng(seed);
    let values = (0..arch.parameter_count())
        .map(|_| r.random_range(-scale..scale))
        .collect();
    ModelParams::new(Arc::clone(arch), values).unwrap()
}

pub fn random_regression_data(n: usize, d: usize, out: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let x = Array2::from_shape_fn((n, d), |_| r.random_range(-1.0..1.0));
    let y = Array2::from_shape_fn((n, out), |_| r.random_range(-1.0..1.0));
    Dataset::new("random", x, Targets::Continuous(y)).unwrap()
}

pub fn random_classification_data(n: usize, d: usize, classes: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let x = Array2::from_shape_fn((n, d), |_| r.random_range(-1.0..1.0));
    let labels = (0..n).map(|_| r.random_range(0..classes)).collect();
    Dataset::new("random", x, Targets::Labels { labels, classes }).unwrap()
}

pub fn arch(sizes: &[usize], task: Task) -> Arc<Architecture> {
    let (input, rest) = sizes.split_first().unwrap();
    let (output, hidden) = rest.split_last().unwrap();
    Arc::new(Architecture::mlp(*input, hidden, *output, task).unwrap())
}

/// Deterministic line data for the conjugate-regression checks.
pub fn line_data(n: usize) -> (Vec<f64>, Vec<f64>) {
    let xs: Vec<f64> = (0..n).map(|i| -0.7 + 2.0 * i as f64 / (n - 1) as f64).collect();
    let ys: Vec<f64> = xs
        .iter()
        .enumerate()
        .map(|(i, x)| 0.8 * x - 0.3 + 0.5 * ((i * 7919 % 13) as f64 / 13.0 - 0.5))
        .collect();
    (xs, ys)
}

pub fn line_dataset(xs: &[f64], ys: &[f64]) -> Dataset {
    let n = xs.len();
    Dataset::new(
        "line",
        Array2::from_shape_vec((n, 1), xs.to_vec()).unwrap(),
        Targets::Continuous(Array2::from_shape_vec((n, 1), ys.to_vec()).unwrap()),
    )
    .unwrap()
}

/// A random scalar regression aggregation case: client means in `[0.5, 3]`,
/// variances in `[0.1, 5]`, prior mean in `[-1, 0]`, prior variance 10 or 10³.
/// Every draw has a positive global precision and a mean bounded away from 0.
pub fn random_scalar_case(r: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, f64, f64) {
    let n = [1, 2, 5][r.random_range(0..3)];
    let mus = (0..n).map(|_| r.random_range(0.5..3.0)).collect();
    let vars = (0..n).map(|_| r.random_range(0.1..5.0)).collect();
    let var_p = if r.random_bool(0.5) { 10.0 } else { 1e3 };
    (mus, vars, r.random_range(-1.0..0.0), var_p)
}

/// A random probability vector with entries bounded away from 0.
pub fn random_simplex(r: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| r.random_range(0.05..1.0)).collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / z).collect()
}

pub const FD_STEP: f64 = 1e-5;

/// Largest relative error between the analytic gradient and central
/// differences over `coords` random coordinates.
pub fn max_fd_error(params: &ModelParams, data: &Dataset, coords: usize, seed: u64) -> f64 {
    let lik = LikelihoodSpec::new(0.1, 1.0).unwrap();
    let batch = data.full_batch();
    let n = data.len();
    let (_, grad) = neg_log_posterior_grad(params, &batch, &lik, n).unwrap();
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..coords {
        let j = r.random_range(0..params.len());
        let shifted = |delta: f64| {
            let mut v = params.values().to_vec();
            v[j] += delta;
            let p = ModelParams::new(Arc::clone(params.arch()), v).unwrap();
            neg_log_posterior_grad(&p, &batch, &lik, n).unwrap().0
        };
        let fd = (shifted(FD_STEP) - shifted(-FD_STEP)) / (2.0 * FD_STEP);
        let denom = grad[j].abs().max(fd.abs()).max(1e-6);
        worst = worst.max((grad[j] - fd).abs() / denom);
    }
    worst
}

/// cSGHMC on a conjugate line fit with exact (full-batch) gradients.
pub fn line_fit_draws(cycles: usize) -> (Vec<Vec<f64>>, [f64; 2], [[f64; 2]; 2]) {
    let (xs, ys) = line_data(50);
    let (noise, prior) = (0.25, 1.0);
    let oracle = conjugate_line_posterior(&xs, &ys, noise, prior);
    let data = line_dataset(&xs, &ys);
    let a = arch(&[1, 1], Task::Regression);
    let cfg = CsghmcConfig {
        cycles,
        epochs_per_cycle: 300,
        initial_step: 3e-3,
        exploration_fraction: 0.8,
        friction: 0.3,
        batch_size: 50,
        samples_per_cycle: 1,
        seed: 5,
    };
    let lik = LikelihoodSpec::new(noise, prior).unwrap();
    let s = csghmc_sample(&ModelParams::zeros(a), &data, &lik, &cfg, 0).unwrap();
    let draws = s.samples.iter().map(|p| p.values().to_vec()).collect();
    (draws, oracle.0, oracle.1)
}
