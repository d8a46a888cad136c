//! Local and prior predictive distributions from parameter samples.
//!
//! The Monte-Carlo predictive is the normalized average over samples. For
//! classification that is the mean of per-sample softmax outputs. For
//! regression the mean is the average network output and the variance adds
//! the ensemble spread (unbiased, per output) to the observation noise σ_n².

use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{forward, softmax, Architecture, LikelihoodSpec, ModelParams, Task};
use crate::rng::rng_from_seed;
use crate::sampler::PosteriorSamples;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PredictiveSummary {
    /// Diagonal Gaussian over the (normalized) targets.
    Regression {
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    Classification {
        probs: Vec<f64>,
    },
}

impl PredictiveSummary {
    pub fn dim(&self) -> usize {
        match self {
            PredictiveSummary::Regression { mean, .. } => mean.len(),
            PredictiveSummary::Classification { probs } => probs.len(),
        }
    }

    pub fn probs(&self) -> Option<&[f64]> {
        match self {
            PredictiveSummary::Classification { probs } => Some(probs),
            PredictiveSummary::Regression { .. } => None,
        }
    }

    pub fn gaussian(&self) -> Option<(&[f64], &[f64])> {
        match self {
            PredictiveSummary::Regression { mean, var } => Some((mean, var)),
            PredictiveSummary::Classification { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PriorPredictiveMode {
    UniformClasses,
    SampledPrior,
    FixedGaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorPredictiveConfig {
    pub mode: PriorPredictiveMode,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub samples: usize,
}

impl PriorPredictiveConfig {
    pub fn uniform() -> Self {
        Self {
            mode: PriorPredictiveMode::UniformClasses,
            mean: Vec::new(),
            var: Vec::new(),
            samples: 0,
        }
    }

    pub fn fixed(mean: Vec<f64>, var: Vec<f64>) -> Self {
        Self {
            mode: PriorPredictiveMode::FixedGaussian,
            mean,
            var,
            samples: 0,
        }
    }

    pub fn sampled(samples: usize) -> Self {
        Self {
            mode: PriorPredictiveMode::SampledPrior,
            mean: Vec::new(),
            var: Vec::new(),
            samples,
        }
    }
}

fn summarize(outputs: &[Array2<f64>], row: usize, task: Task, noise_var: f64) -> PredictiveSummary {
    let s = outputs.len() as f64;
    match task {
        Task::Classification => {
            let k = outputs[0].ncols();
            let mut probs = vec![0.0; k];
            for out in outputs {
                let p = softmax(&out.row(row).to_vec());
                for (acc, v) in probs.iter_mut().zip(p) {
                    *acc += v;
                }
            }
            for p in &mut probs {
                *p /= s;
            }
            PredictiveSummary::Classification { probs }
        }
        Task::Regression => {
            // Moments are accumulated about the first member's output, which
            // keeps identical members exact and avoids cancellation.
            let d = outputs[0].ncols();
            let mut mean = Vec::with_capacity(d);
            let mut var = Vec::with_capacity(d);
            for j in 0..d {
                let pivot = outputs[0][[row, j]];
                let (mut sum, mut sq) = (0.0, 0.0);
                for out in outputs {
                    let dev = out[[row, j]] - pivot;
                    sum += dev;
                    sq += dev * dev;
                }
                mean.push(pivot + sum / s);
                let epistemic = if outputs.len() >= 2 {
                    ((sq - sum * sum / s) / (s - 1.0)).max(0.0)
                } else {
                    0.0
                };
                var.push(noise_var + epistemic);
            }
            PredictiveSummary::Regression { mean, var }
        }
    }
}

fn ensemble_outputs(params: &[ModelParams], inputs: ArrayView2<'_, f64>) -> Result<Vec<Array2<f64>>> {
    params.iter().map(|p| forward(p, inputs)).collect()
}

/// Predictive summaries for every row of `inputs`.
pub fn predict_ensemble_batch(
    samples: &PosteriorSamples,
    inputs: ArrayView2<'_, f64>,
    lik: &LikelihoodSpec,
) -> Result<Vec<PredictiveSummary>> {
    predict_params_batch(&samples.samples, &samples.arch, inputs, lik)
}

pub(crate) fn predict_params_batch(
    params: &[ModelParams],
    arch: &Architecture,
    inputs: ArrayView2<'_, f64>,
    lik: &LikelihoodSpec,
) -> Result<Vec<PredictiveSummary>> {
    if params.is_empty() {
        return Err(Error::InvalidConfig("ensemble has no members".into()));
    }
    let outputs = ensemble_outputs(params, inputs)?;
    Ok((0..inputs.nrows())
        .map(|r| summarize(&outputs, r, arch.task(), lik.noise_variance))
        .collect())
}

pub fn predict_ensemble(
    samples: &PosteriorSamples,
    x: &[f64],
    lik: &LikelihoodSpec,
) -> Result<PredictiveSummary> {
    let view = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
    Ok(predict_ensemble_batch(samples, view, lik)?.remove(0))
}

/// Prior predictive `p(y | x)` for every row of `inputs`. `SampledPrior`
/// draws one set of parameter vectors and reuses it for all rows.
pub fn prior_predictive_batch(
    arch: &Arc<Architecture>,
    lik: &LikelihoodSpec,
    inputs: ArrayView2<'_, f64>,
    cfg: &PriorPredictiveConfig,
    seed: u64,
) -> Result<Vec<PredictiveSummary>> {
    let rows = inputs.nrows();
    match cfg.mode {
        PriorPredictiveMode::UniformClasses => {
            if arch.task() != Task::Classification {
                return Err(Error::InvalidConfig(
                    "uniform-class prior predictive requires classification".into(),
                ));
            }
            let k = arch.output_dim();
            let probs = vec![1.0 / k as f64; k];
            Ok(vec![PredictiveSummary::Classification { probs }; rows])
        }
        PriorPredictiveMode::FixedGaussian => {
            if arch.task() != Task::Regression {
                return Err(Error::InvalidConfig(
                    "fixed Gaussian prior predictive requires regression".into(),
                ));
            }
            let d = arch.output_dim();
            if cfg.mean.len() != d || cfg.var.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: cfg.mean.len().min(cfg.var.len()),
                    context: "prior predictive mean/variance",
                });
            }
            if cfg.var.iter().any(|&v| v.is_nan() || v <= 0.0) {
                return Err(Error::InvalidConfig(
                    "prior predictive variances must be positive".into(),
                ));
            }
            let summary = PredictiveSummary::Regression {
                mean: cfg.mean.clone(),
                var: cfg.var.clone(),
            };
            Ok(vec![summary; rows])
        }
        PriorPredictiveMode::SampledPrior => {
            if arch.task() == Task::Regression && cfg.samples < 2 {
                return Err(Error::InvalidConfig(format!(
                    "sampled regression prior predictive needs at least 2 draws, got {}",
                    cfg.samples
                )));
            }
            if cfg.samples == 0 {
                return Err(Error::InvalidConfig("prior sample count must be positive".into()));
            }
            let mut rng = rng_from_seed(seed);
            let normal = Normal::new(0.0, lik.prior_variance.sqrt())
                .map_err(|e| Error::InvalidConfig(e.to_string()))?;
            let params = (0..cfg.samples)
                .map(|_| {
                    let values = (0..arch.parameter_count())
                        .map(|_| normal.sample(&mut rng))
                        .collect();
                    ModelParams::new(Arc::clone(arch), values)
                })
                .collect::<Result<Vec<_>>>()?;
            predict_params_batch(&params, arch, inputs, lik)
        }
    }
}

pub fn prior_predictive(
    arch: &Arc<Architecture>,
    lik: &LikelihoodSpec,
    x: &[f64],
    cfg: &PriorPredictiveConfig,
    seed: u64,
) -> Result<PredictiveSummary> {
    let view = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
    Ok(prior_predictive_batch(arch, lik, view, cfg, seed)?.remove(0))
}
