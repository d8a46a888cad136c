//! Local training: momentum SGD and cyclical stochastic-gradient HMC.
//!
//! cSGHMC runs `M` cycles of `T` steps each. Within a cycle the step size is
//!
//! ```text
//! α_t = (α₀ / 2) · (cos(π · t / T) + 1),   t = 0, …, T - 1
//! ```
//!
//! The first `⌊exploration_fraction · T⌋` steps are noise-free momentum
//! updates; the rest are SGHMC updates
//!
//! ```text
//! v ← (1 - friction) · v - α_t · ĝ + N(0, 2 · friction · α_t · I)
//! w ← w + v
//! ```
//!
//! Snapshots are taken at evenly spaced steps inside the final 20% of every
//! cycle, the last one always at `t = T - 1`.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{neg_log_posterior_grad_into, Architecture, LikelihoodSpec, ModelParams};
use crate::rng::{derive_seed, rng_from_seed, stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 25,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "epochs and batch size must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CsghmcConfig {
    pub cycles: usize,
    pub epochs_per_cycle: usize,
    /// α₀, in units of the full-data negative log-posterior.
    pub initial_step: f64,
    pub exploration_fraction: f64,
    pub friction: f64,
    pub batch_size: usize,
    pub samples_per_cycle: usize,
    pub seed: u64,
}

impl Default for CsghmcConfig {
    fn default() -> Self {
        Self {
            cycles: 10,
            epochs_per_cycle: 5,
            initial_step: 1e-3,
            exploration_fraction: 0.8,
            friction: 0.1,
            batch_size: 64,
            samples_per_cycle: 1,
            seed: 0,
        }
    }
}

/// Portion of each cycle, counted from its end, in which snapshots are taken.
pub const SAMPLING_WINDOW: f64 = 0.2;

impl CsghmcConfig {
    pub fn sample_count(&self) -> usize {
        self.cycles * self.samples_per_cycle
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.cycles == 0 || self.epochs_per_cycle == 0 || self.batch_size == 0 {
            return bad("cycles, epochs per cycle and batch size must be positive".into());
        }
        if self.samples_per_cycle == 0 {
            return bad("samples per cycle must be positive".into());
        }
        if !(self.initial_step > 0.0 && self.initial_step.is_finite()) {
            return bad(format!(
                "initial step must be positive, got {}",
                self.initial_step
            ));
        }
        if !(0.0..1.0).contains(&self.exploration_fraction) {
            return bad(format!(
                "exploration fraction must lie in [0, 1), got {}",
                self.exploration_fraction
            ));
        }
        if !(self.friction > 0.0 && self.friction <= 1.0) {
            return bad(format!("friction must lie in (0, 1], got {}", self.friction));
        }
        Ok(())
    }
}

/// Cosine step size at step `t` of a cycle with `steps_per_cycle` steps.
pub fn cyclical_step_size(initial: f64, t: usize, steps_per_cycle: usize) -> f64 {
    let phase = std::f64::consts::PI * t as f64 / steps_per_cycle as f64;
    0.5 * initial * (phase.cos() + 1.0)
}

/// Steps within a cycle at which snapshots are recorded.
pub fn snapshot_steps(steps_per_cycle: usize, samples_per_cycle: usize) -> Result<Vec<usize>> {
    let window = ((SAMPLING_WINDOW * steps_per_cycle as f64).ceil() as usize).max(1);
    if samples_per_cycle > window {
        return Err(Error::InvalidConfig(format!(
            "{samples_per_cycle} samples per cycle do not fit in a sampling window of {window} steps"
        )));
    }
    let start = steps_per_cycle - window;
    Ok((0..samples_per_cycle)
        .map(|j| start + (j + 1) * window / samples_per_cycle - 1)
        .collect())
}

/// Source of (stochastic) gradients of a potential `U(w)`.
pub trait GradientEstimator {
    fn dim(&self) -> usize;

    /// Gradient evaluations making up one epoch.
    fn steps_per_epoch(&self) -> usize;

    /// Writes an estimate of `∇U(w)` into `grad`.
    fn gradient(&mut self, w: &[f64], grad: &mut [f64]) -> Result<()>;
}

/// Minibatch gradients of the network negative log-posterior. Each epoch
/// visits a fresh seeded permutation of the data in contiguous batches.
pub struct MinibatchPotential<'a> {
    arch: Arc<Architecture>,
    data: &'a Dataset,
    lik: LikelihoodSpec,
    batch_size: usize,
    /// Multiplies both the value and the gradient.
    scale: f64,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl<'a> MinibatchPotential<'a> {
    pub fn new(
        arch: Arc<Architecture>,
        data: &'a Dataset,
        lik: LikelihoodSpec,
        batch_size: usize,
        shuffle_seed: u64,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyDataset(data.name.clone()));
        }
        if data.task() != arch.task() {
            return Err(Error::InvalidConfig(format!(
                "dataset task {:?} does not match architecture task {:?}",
                data.task(),
                arch.task()
            )));
        }
        lik.validate()?;
        Ok(Self {
            arch,
            data,
            lik,
            batch_size: batch_size.min(data.len()),
            scale: 1.0,
            order: (0..data.len()).collect(),
            cursor: 0,
            rng: rng_from_seed(shuffle_seed),
        })
    }

    /// Scale the potential by a constant, e.g. `1 / N` for per-example units.
    pub fn scaled(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }
}

impl GradientEstimator for MinibatchPotential<'_> {
    fn dim(&self) -> usize {
        self.arch.parameter_count()
    }

    fn steps_per_epoch(&self) -> usize {
        self.data.len().div_ceil(self.batch_size)
    }

    fn gradient(&mut self, w: &[f64], grad: &mut [f64]) -> Result<()> {
        if self.cursor == 0 {
            self.order.shuffle(&mut self.rng);
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch = self.data.batch(&self.order[self.cursor..end]);
        self.cursor = if end == self.order.len() { 0 } else { end };
        neg_log_posterior_grad_into(&self.arch, w, &batch, &self.lik, self.data.len(), grad)?;
        if self.scale != 1.0 {
            for g in grad.iter_mut() {
                *g *= self.scale;
            }
        }
        Ok(())
    }
}

/// Run cSGHMC on an arbitrary potential and return the snapshots in
/// collection order.
pub fn csghmc_chain<G: GradientEstimator>(
    start: &[f64],
    potential: &mut G,
    cfg: &CsghmcConfig,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    if start.len() != potential.dim() {
        return Err(Error::DimensionMismatch {
            expected: potential.dim(),
            got: start.len(),
            context: "sampler start point",
        });
    }
    let steps = cfg.epochs_per_cycle * potential.steps_per_epoch();
    let explore = (cfg.exploration_fraction * steps as f64).floor() as usize;
    let snaps = snapshot_steps(steps, cfg.samples_per_cycle)?;
    let mut noise_rng = rng_from_seed(derive_seed(cfg.seed, stream::NOISE));

    let dim = start.len();
    let mut w = start.to_vec();
    let mut v = vec![0.0; dim];
    let mut g = vec![0.0; dim];
    let keep = 1.0 - cfg.friction;
    let mut out = Vec::with_capacity(cfg.sample_count());

    for cycle in 0..cfg.cycles {
        let mut next_snap = snaps.iter().peekable();
        for t in 0..steps {
            let alpha = cyclical_step_size(cfg.initial_step, t, steps);
            potential.gradient(&w, &mut g).map_err(|e| match e {
                Error::Divergence(m) => Error::Divergence(format!("cycle {cycle}, step {t}: {m}")),
                other => other,
            })?;
            if t < explore {
                for ((vi, wi), gi) in v.iter_mut().zip(w.iter_mut()).zip(&g) {
                    *vi = keep * *vi - alpha * gi;
                    *wi += *vi;
                }
            } else {
                let noise_std = (2.0 * cfg.friction * alpha).sqrt();
                for ((vi, wi), gi) in v.iter_mut().zip(w.iter_mut()).zip(&g) {
                    let xi: f64 = StandardNormal.sample(&mut noise_rng);
                    *vi = keep * *vi - alpha * gi + noise_std * xi;
                    *wi += *vi;
                }
            }
            if let Some(i) = w.iter().position(|x| !x.is_finite()) {
                return Err(Error::Divergence(format!(
                    "cycle {cycle}, step {t}: parameter {i} is not finite"
                )));
            }
            while next_snap.peek() == Some(&&t) {
                out.push(w.clone());
                next_snap.next();
            }
        }
    }
    Ok(out)
}

/// Samples from one client's model-space posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    pub client_id: u32,
    pub samples: Vec<ModelParams>,
    pub arch: Arc<Architecture>,
    pub dataset_size: usize,
}

impl PosteriorSamples {
    pub fn new(
        client_id: u32,
        arch: Arc<Architecture>,
        samples: Vec<ModelParams>,
        dataset_size: usize,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidConfig("posterior needs at least one sample".into()));
        }
        if samples.iter().any(|s| s.arch() != &arch) {
            return Err(Error::InvalidConfig(
                "all samples must share the posterior's architecture".into(),
            ));
        }
        Ok(Self {
            client_id,
            samples,
            arch,
            dataset_size,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

pub fn csghmc_sample(
    start: &ModelParams,
    data: &Dataset,
    lik: &LikelihoodSpec,
    cfg: &CsghmcConfig,
    client_id: u32,
) -> Result<PosteriorSamples> {
    let arch = Arc::clone(start.arch());
    let mut potential = MinibatchPotential::new(
        Arc::clone(&arch),
        data,
        *lik,
        cfg.batch_size,
        derive_seed(cfg.seed, stream::SHUFFLE),
    )?;
    let draws = csghmc_chain(start.values(), &mut potential, cfg)?;
    let samples = draws
        .into_iter()
        .map(|w| ModelParams::new(Arc::clone(&arch), w))
        .collect::<Result<Vec<_>>>()?;
    PosteriorSamples::new(client_id, arch, samples, data.len())
}

/// Momentum SGD on the negative log-posterior divided by the local dataset
/// size, so learning rates are in conventional per-example units.
pub fn sgd_train(
    start: &ModelParams,
    data: &Dataset,
    lik: &LikelihoodSpec,
    cfg: &SgdConfig,
) -> Result<ModelParams> {
    cfg.validate()?;
    let arch = Arc::clone(start.arch());
    let mut potential = MinibatchPotential::new(
        Arc::clone(&arch),
        data,
        *lik,
        cfg.batch_size,
        derive_seed(cfg.seed, stream::SHUFFLE),
    )?
    .scaled(1.0 / data.len() as f64);
    let mut w = start.values().to_vec();
    let mut v = vec![0.0; w.len()];
    let mut g = vec![0.0; w.len()];
    for epoch in 0..cfg.epochs {
        for _ in 0..potential.steps_per_epoch() {
            potential.gradient(&w, &mut g).map_err(|e| match e {
                Error::Divergence(m) => Error::Divergence(format!("epoch {epoch}: {m}")),
                other => other,
            })?;
            for ((vi, wi), gi) in v.iter_mut().zip(w.iter_mut()).zip(&g) {
                *vi = cfg.momentum * *vi - cfg.learning_rate * gi;
                *wi += *vi;
            }
        }
        if let Some(i) = w.iter().position(|x| !x.is_finite()) {
            return Err(Error::Divergence(format!(
                "epoch {epoch}: parameter {i} is not finite"
            )));
        }
    }
    ModelParams::new(arch, w)
}
