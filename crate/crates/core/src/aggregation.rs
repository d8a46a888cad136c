//! Model combination rules.
//!
//! Predictive-space aggregation multiplies client predictives and divides by
//! the prior predictive `n - 1` times. For Gaussian predictives this is, per
//! output dimension,
//!
//! ```text
//! τ_g = Σ_i σ_i⁻² − (n−1) σ_p⁻²             (clamped below at ε_prec)
//! μ_g = (Σ_i σ_i⁻² μ_i − (n−1) σ_p⁻² μ_p) / τ_g
//! ```
//!
//! and for categorical predictives the class-wise product is formed in log
//! space and renormalized. The module also holds the FedAvg weighted mean and
//! the diagonal-Gaussian product used by EP MCMC.

use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{softmax, Architecture, ModelParams};
use crate::posterior::PredictiveSummary;
use crate::rng::rng_from_seed;
use crate::sampler::PosteriorSamples;

/// Sign of the prior-mean term in the aggregated regression mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SignConvention {
    /// Divide by the prior density: the prior term is subtracted.
    Minus,
    /// Add the prior term, matching the formula as usually printed.
    Plus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregationConfig {
    pub sign_convention: SignConvention,
    pub precision_floor: f64,
    pub prob_floor: f64,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            sign_convention: SignConvention::Minus,
            precision_floor: 1e-6,
            prob_floor: 1e-6,
        }
    }
}

impl AggregationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.precision_floor.is_nan() || self.precision_floor <= 0.0 {
            return Err(Error::InvalidConfig("precision floor must be positive".into()));
        }
        if !(self.prob_floor > 0.0 && self.prob_floor < 1.0) {
            return Err(Error::InvalidConfig(
                "probability floor must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// An aggregated value plus the number of clamp or floor events it needed.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregated<T> {
    pub value: T,
    pub events: usize,
}

fn regression_parts(s: &PredictiveSummary) -> Result<(&[f64], &[f64])> {
    s.gaussian()
        .ok_or_else(|| Error::InvalidConfig("expected a regression summary".into()))
}

pub fn aggregate_regression(
    locals: &[PredictiveSummary],
    prior: &PredictiveSummary,
    cfg: &AggregationConfig,
) -> Result<Aggregated<PredictiveSummary>> {
    let first = locals
        .first()
        .ok_or_else(|| Error::InvalidConfig("no client predictives to aggregate".into()))?;
    let d = first.dim();
    let (prior_mean, prior_var) = regression_parts(prior)?;
    if prior_mean.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: prior_mean.len(),
            context: "prior predictive dimension",
        });
    }
    let correction = (locals.len() - 1) as f64;
    let mut precision = vec![0.0; d];
    let mut weighted = vec![0.0; d];
    for local in locals {
        let (mean, var) = regression_parts(local)?;
        if mean.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: mean.len(),
                context: "client predictive dimension",
            });
        }
        for j in 0..d {
            precision[j] += 1.0 / var[j];
            weighted[j] += mean[j] / var[j];
        }
    }
    let sign = match cfg.sign_convention {
        SignConvention::Minus => -1.0,
        SignConvention::Plus => 1.0,
    };
    let mut events = 0;
    let mut mean = Vec::with_capacity(d);
    let mut var = Vec::with_capacity(d);
    for j in 0..d {
        let prior_precision = correction / prior_var[j];
        let mut tau = precision[j] - prior_precision;
        if tau < cfg.precision_floor {
            tau = cfg.precision_floor;
            events += 1;
        }
        let v = 1.0 / tau;
        mean.push(v * (weighted[j] + sign * prior_precision * prior_mean[j]));
        var.push(v);
    }
    Ok(Aggregated {
        value: PredictiveSummary::Regression { mean, var },
        events,
    })
}

/// Normalized inverse-variance weights of scalar client predictives.
pub fn precision_weights(locals: &[PredictiveSummary]) -> Result<Vec<f64>> {
    let mut inv = Vec::with_capacity(locals.len());
    for local in locals {
        let (mean, var) = regression_parts(local)?;
        if mean.len() != 1 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: mean.len(),
                context: "precision weights need scalar outputs",
            });
        }
        inv.push(1.0 / var[0]);
    }
    let total: f64 = inv.iter().sum();
    Ok(inv.into_iter().map(|p| p / total).collect())
}

/// Class-wise product of client predictives over the prior, renormalized.
pub fn aggregate_classification(
    locals: &[Vec<f64>],
    prior: &[f64],
    cfg: &AggregationConfig,
) -> Result<Aggregated<Vec<f64>>> {
    let k = prior.len();
    if locals.is_empty() {
        return Err(Error::InvalidConfig("no client predictives to aggregate".into()));
    }
    let mut events = 0;
    let mut floored_ln = |p: f64| {
        if p < cfg.prob_floor {
            events += 1;
            cfg.prob_floor.ln()
        } else {
            p.ln()
        }
    };
    let correction = (locals.len() - 1) as f64;
    let mut scores: Vec<f64> = prior.iter().map(|&p| -correction * floored_ln(p)).collect();
    for local in locals {
        if local.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: local.len(),
                context: "client class count",
            });
        }
        for (s, &p) in scores.iter_mut().zip(local) {
            *s += floored_ln(p);
        }
    }
    Ok(Aggregated {
        value: softmax(&scores),
        events,
    })
}

/// FedAvg: coordinate-wise mean weighted by client dataset sizes.
pub fn fedavg_params(params: &[ModelParams], counts: &[usize]) -> Result<ModelParams> {
    let first = params
        .first()
        .ok_or_else(|| Error::InvalidConfig("no client models to average".into()))?;
    if params.len() != counts.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            got: counts.len(),
            context: "dataset size count",
        });
    }
    if params.iter().any(|p| p.arch() != first.arch()) {
        return Err(Error::InvalidConfig(
            "client models have different architectures".into(),
        ));
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::InvalidConfig("total dataset size is zero".into()));
    }
    // Summation runs in a canonical order so the result is bitwise independent
    // of the order the clients were supplied in.
    let mut order: Vec<usize> = (0..params.len()).collect();
    order.sort_by(|&a, &b| {
        counts[a].cmp(&counts[b]).then_with(|| {
            let bits = |i: usize| params[i].values().iter().map(|v| v.to_bits());
            bits(a).cmp(bits(b))
        })
    });
    let mut acc = vec![0.0; first.len()];
    for i in order {
        let (p, k) = (&params[i], counts[i]);
        let weight = k as f64 / total as f64;
        for (a, &w) in acc.iter_mut().zip(p.values()) {
            *a += weight * w;
        }
    }
    ModelParams::new(Arc::clone(first.arch()), acc)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussianModelPosterior {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub arch: Arc<Architecture>,
}

pub const MODEL_VARIANCE_FLOOR: f64 = 1e-8;

/// Per-coordinate sample mean and unbiased variance.
pub fn fit_diag_gaussian(samples: &PosteriorSamples) -> Result<DiagGaussianModelPosterior> {
    let s = samples.len();
    if s < 2 {
        return Err(Error::InvalidConfig(format!(
            "fitting a Gaussian needs at least 2 samples, got {s}"
        )));
    }
    let p = samples.arch.parameter_count();
    let mut mean = vec![0.0; p];
    for w in &samples.samples {
        for (m, &v) in mean.iter_mut().zip(w.values()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= s as f64;
    }
    let mut var = vec![0.0; p];
    for w in &samples.samples {
        for ((acc, &v), &m) in var.iter_mut().zip(w.values()).zip(&mean) {
            *acc += (v - m).powi(2);
        }
    }
    for v in &mut var {
        *v = (*v / (s as f64 - 1.0)).max(MODEL_VARIANCE_FLOOR);
    }
    Ok(DiagGaussianModelPosterior {
        mean,
        var,
        arch: Arc::clone(&samples.arch),
    })
}

/// Product of diagonal Gaussian sub-posteriors divided by the N(0, σ_w² I)
/// prior `n - 1` times, followed by `S_out` i.i.d. draws.
pub fn ep_mcmc_combine(
    locals: &[DiagGaussianModelPosterior],
    prior_variance: f64,
    cfg: &AggregationConfig,
) -> Result<Aggregated<DiagGaussianModelPosterior>> {
    let first = locals
        .first()
        .ok_or_else(|| Error::InvalidConfig("no client posteriors to combine".into()))?;
    if locals.iter().any(|l| l.arch != first.arch) {
        return Err(Error::InvalidConfig(
            "client posteriors have different architectures".into(),
        ));
    }
    let p = first.mean.len();
    let correction = (locals.len() - 1) as f64 / prior_variance;
    let mut events = 0;
    let mut mean = vec![0.0; p];
    let mut var = vec![0.0; p];
    for j in 0..p {
        let mut tau = 0.0;
        let mut weighted = 0.0;
        for l in locals {
            tau += 1.0 / l.var[j];
            weighted += l.mean[j] / l.var[j];
        }
        tau -= correction;
        if tau < cfg.precision_floor {
            tau = cfg.precision_floor;
            events += 1;
        }
        var[j] = 1.0 / tau;
        mean[j] = weighted / tau;
    }
    Ok(Aggregated {
        value: DiagGaussianModelPosterior {
            mean,
            var,
            arch: Arc::clone(&first.arch),
        },
        events,
    })
}

pub fn ep_mcmc_aggregate(
    locals: &[DiagGaussianModelPosterior],
    prior_variance: f64,
    cfg: &AggregationConfig,
    sample_count: usize,
    seed: u64,
) -> Result<Aggregated<PosteriorSamples>> {
    if sample_count == 0 {
        return Err(Error::InvalidConfig(
            "EP MCMC needs at least one output sample".into(),
        ));
    }
    let combined = ep_mcmc_combine(locals, prior_variance, cfg)?;
    let global = &combined.value;
    let mut rng = rng_from_seed(seed);
    let samples = (0..sample_count)
        .map(|_| {
            let values = global
                .mean
                .iter()
                .zip(&global.var)
                .map(|(&m, &v)| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + v.sqrt() * z
                })
                .collect();
            ModelParams::new(Arc::clone(&global.arch), values)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Aggregated {
        value: PosteriorSamples::new(u32::MAX, Arc::clone(&global.arch), samples, 0)?,
        events: combined.events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Task;

    fn reg(mean: f64, var: f64) -> PredictiveSummary {
        PredictiveSummary::Regression {
            mean: vec![mean],
            var: vec![var],
        }
    }

    fn gaussian(s: &PredictiveSummary) -> (f64, f64) {
        let (m, v) = s.gaussian().unwrap();
        (m[0], v[0])
    }

    #[test]
    fn single_client_regression_is_neutral() {
        let local = PredictiveSummary::Regression {
            mean: vec![0.3, -1.2],
            var: vec![0.5, 2.0],
        };
        let prior = PredictiveSummary::Regression {
            mean: vec![4.0, 4.0],
            var: vec![10.0, 10.0],
        };
        let out = aggregate_regression(
            std::slice::from_ref(&local),
            &prior,
            &AggregationConfig::default(),
        )
        .unwrap();
        assert_eq!(out.value, local);
        assert_eq!(out.events, 0);
    }

    #[test]
    fn uninformative_prior_equal_precision() {
        let prior = reg(0.0, f64::INFINITY);
        let out = aggregate_regression(
            &[reg(0.0, 1.0), reg(2.0, 1.0)],
            &prior,
            &AggregationConfig::default(),
        )
        .unwrap();
        assert_eq!(gaussian(&out.value), (1.0, 0.5));
    }

    #[test]
    fn worked_two_client_case() {
        let prior = reg(0.0, 10.0);
        let out = aggregate_regression(
            &[reg(0.0, 1.0), reg(3.0, 2.0)],
            &prior,
            &AggregationConfig::default(),
        )
        .unwrap();
        let (m, v) = gaussian(&out.value);
        assert!((1.0 / v - 1.4).abs() < 1e-12);
        assert!((v - 0.714_285_714_285_714_3).abs() < 1e-12);
        assert!((m - 1.5 / 1.4).abs() < 1e-12);
    }

    #[test]
    fn sign_conventions_differ_only_with_nonzero_prior_mean() {
        let locals = [reg(0.0, 1.0), reg(3.0, 2.0)];
        let minus = AggregationConfig::default();
        let plus = AggregationConfig {
            sign_convention: SignConvention::Plus,
            ..minus
        };
        let zero = reg(0.0, 10.0);
        assert_eq!(
            aggregate_regression(&locals, &zero, &minus).unwrap(),
            aggregate_regression(&locals, &zero, &plus).unwrap()
        );
        let shifted = reg(1.0, 10.0);
        let a = gaussian(&aggregate_regression(&locals, &shifted, &minus).unwrap().value);
        let b = gaussian(&aggregate_regression(&locals, &shifted, &plus).unwrap().value);
        assert!((a.0 - (1.5 - 0.1) / 1.4).abs() < 1e-12);
        assert!((b.0 - (1.5 + 0.1) / 1.4).abs() < 1e-12);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn precision_clamp_is_counted() {
        // Precision 2·0.01 − 1·1 < 0.
        let out = aggregate_regression(
            &[reg(0.0, 100.0), reg(1.0, 100.0)],
            &reg(0.0, 1.0),
            &AggregationConfig::default(),
        )
        .unwrap();
        assert_eq!(out.events, 1);
        assert_eq!(gaussian(&out.value).1, 1e6);
    }

    #[test]
    fn precision_weight_cases() {
        let w = precision_weights(&vec![reg(1.0, 3.0); 5]).unwrap();
        assert!(w.iter().all(|&r| (r - 0.2).abs() < 1e-15));
        let w = precision_weights(&[reg(0.0, 1.0), reg(0.0, 4.0)]).unwrap();
        assert!((w[0] - 0.8).abs() < 1e-15 && (w[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn two_client_binary_classification() {
        let out = aggregate_classification(
            &[vec![0.8, 0.2], vec![0.6, 0.4]],
            &[0.5, 0.5],
            &AggregationConfig::default(),
        )
        .unwrap();
        assert!((out.value[0] - 6.0 / 7.0).abs() < 1e-12);
        assert!((out.value[1] - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_locals_give_uniform_output() {
        let u = vec![0.25; 4];
        let out = aggregate_classification(&vec![u.clone(); 3], &u, &AggregationConfig::default()).unwrap();
        for p in out.value {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn one_hot_locals_stay_finite() {
        let out = aggregate_classification(
            &[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]],
            &[1.0 / 3.0; 3],
            &AggregationConfig::default(),
        )
        .unwrap();
        assert!(out.value.iter().all(|p| p.is_finite()));
        assert!((out.value.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(out.events, 4);
    }

    fn arch() -> Arc<Architecture> {
        Arc::new(Architecture::mlp(1, &[], 1, Task::Regression).unwrap())
    }

    fn params(values: &[f64]) -> ModelParams {
        ModelParams::new(arch(), values.to_vec()).unwrap()
    }

    #[test]
    fn fedavg_cases() {
        let a = params(&[0.5, -1.0]);
        assert_eq!(fedavg_params(&[a.clone(), a.clone()], &[3, 7]).unwrap(), a);
        let out = fedavg_params(&[params(&[0.0, 0.0]), params(&[2.0, 2.0])], &[1, 1]).unwrap();
        assert_eq!(out.values(), &[1.0, 1.0]);
        let out = fedavg_params(&[params(&[0.0, 0.0]), params(&[4.0, 4.0])], &[1, 3]).unwrap();
        assert_eq!(out.values(), &[3.0, 3.0]);
    }

    #[test]
    fn fedavg_rejects_mismatched_arch() {
        let other = Arc::new(Architecture::mlp(2, &[], 1, Task::Regression).unwrap());
        let b = ModelParams::zeros(other);
        assert!(fedavg_params(&[params(&[0.0, 0.0]), b], &[1, 1]).is_err());
    }

    fn posterior(rows: &[[f64; 2]]) -> PosteriorSamples {
        let samples = rows.iter().map(|r| params(r)).collect();
        PosteriorSamples::new(0, arch(), samples, 5).unwrap()
    }

    #[test]
    fn diag_gaussian_moments() {
        let fit = fit_diag_gaussian(&posterior(&[[1.0, -2.0], [1.0, 4.0]])).unwrap();
        assert_eq!(fit.mean, vec![1.0, 1.0]);
        assert_eq!(fit.var, vec![MODEL_VARIANCE_FLOOR, 18.0]);
        assert!(fit_diag_gaussian(&posterior(&[[0.0, 0.0]])).is_err());
    }

    #[test]
    fn ep_symmetric_product() {
        let a = DiagGaussianModelPosterior {
            mean: vec![-1.0, 0.0],
            var: vec![1.0, 1.0],
            arch: arch(),
        };
        let b = DiagGaussianModelPosterior {
            mean: vec![1.0, 0.0],
            var: vec![1.0, 1.0],
            arch: arch(),
        };
        let out = ep_mcmc_combine(
            &[a.clone(), b.clone()],
            f64::INFINITY,
            &AggregationConfig::default(),
        )
        .unwrap();
        assert_eq!(out.value.mean, vec![0.0, 0.0]);
        assert_eq!(out.value.var, vec![0.5, 0.5]);

        let c = DiagGaussianModelPosterior {
            mean: vec![0.0, 0.0],
            var: vec![2.0, 2.0],
            arch: arch(),
        };
        let out = ep_mcmc_combine(&[a, c], 10.0, &AggregationConfig::default()).unwrap();
        assert!((1.0 / out.value.var[0] - 1.4).abs() < 1e-12);
    }
}
