//! Dense ReLU networks over a flat parameter vector.
//!
//! Parameters are stored layer by layer. Each layer contributes its weight
//! matrix in row-major `(fan_out, fan_in)` order followed by its `fan_out`
//! biases. Hidden layers use the architecture's activation; the final layer is
//! linear and produces regression means or classification logits.
//!
//! The only objective is the minibatch negative log-posterior
//!
//! ```text
//! U(w) = (N / b) · Σ_batch NLL(y | x, w) + ||w||² / (2 σ_w²)
//! ```
//!
//! with a homoscedastic Gaussian likelihood for regression and a categorical
//! likelihood on softmax outputs for classification. Its gradient is computed
//! by backpropagation.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Activation {
    Relu,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    Regression,
    Classification,
}

impl Task {
    pub fn code(self) -> u8 {
        match self {
            Task::Regression => 0,
            Task::Classification => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Task::Regression),
            1 => Some(Task::Classification),
            _ => None,
        }
    }
}

/// Shape of a dense network: `[input, hidden..., output]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Architecture {
    layer_sizes: Vec<usize>,
    activation: Activation,
    task: Task,
}

/// Location of one layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSlot {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Offset of the weight block; biases follow at `offset + fan_in * fan_out`.
    pub offset: usize,
}

impl LayerSlot {
    pub fn bias_offset(&self) -> usize {
        self.offset + self.fan_in * self.fan_out
    }

    pub fn len(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Architecture {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, task: Task) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidArchitecture(format!(
                "need at least input and output sizes, got {layer_sizes:?}"
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::InvalidArchitecture(format!(
                "layer sizes must be positive, got {layer_sizes:?}"
            )));
        }
        if task == Task::Classification && *layer_sizes.last().unwrap() < 2 {
            return Err(Error::InvalidArchitecture(
                "classification needs at least two output classes".into(),
            ));
        }
        Ok(Self {
            layer_sizes,
            activation,
            task,
        })
    }

    /// ReLU MLP with the given hidden widths.
    pub fn mlp(input: usize, hidden: &[usize], output: usize, task: Task) -> Result<Self> {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input);
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        Self::new(sizes, Activation::Relu, task)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn slots(&self) -> Vec<LayerSlot> {
        let mut offset = 0;
        self.layer_sizes
            .windows(2)
            .map(|w| {
                let slot = LayerSlot {
                    fan_in: w[0],
                    fan_out: w[1],
                    offset,
                };
                offset += slot.len();
                slot
            })
            .collect()
    }
}

/// A point `w` in parameter space for a given architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    values: Vec<f64>,
    arch: Arc<Architecture>,
}

impl ModelParams {
    pub fn new(arch: Arc<Architecture>, values: Vec<f64>) -> Result<Self> {
        if values.len() != arch.parameter_count() {
            return Err(Error::DimensionMismatch {
                expected: arch.parameter_count(),
                got: values.len(),
                context: "parameter vector length",
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!(
                "parameter {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Self { values, arch })
    }

    pub fn zeros(arch: Arc<Architecture>) -> Self {
        let values = vec![0.0; arch.parameter_count()];
        Self { values, arch }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn arch(&self) -> &Arc<Architecture> {
        &self.arch
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn layer(&self, slot: &LayerSlot) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        layer_views(&self.values, slot)
    }
}

fn layer_views<'a>(values: &'a [f64], slot: &LayerSlot) -> (ArrayView2<'a, f64>, ArrayView1<'a, f64>) {
    let w = ArrayView2::from_shape(
        (slot.fan_out, slot.fan_in),
        &values[slot.offset..slot.bias_offset()],
    )
    .expect("slot shape matches parameter layout");
    let b = ArrayView1::from(&values[slot.bias_offset()..slot.offset + slot.len()]);
    (w, b)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// `N × out_dim` regression targets.
    Continuous(Array2<f64>),
    Labels {
        labels: Vec<usize>,
        classes: usize,
    },
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Continuous(y) => y.nrows(),
            Targets::Labels { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task(&self) -> Task {
        match self {
            Targets::Continuous(_) => Task::Regression,
            Targets::Labels { .. } => Task::Classification,
        }
    }

    pub fn select(&self, rows: &[usize]) -> Targets {
        match self {
            Targets::Continuous(y) => Targets::Continuous(y.select(Axis(0), rows)),
            Targets::Labels { labels, classes } => Targets::Labels {
                labels: rows.iter().map(|&r| labels[r]).collect(),
                classes: *classes,
            },
        }
    }
}

/// Inputs and targets of one minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub targets: Targets,
}

impl Batch {
    pub fn new(inputs: Array2<f64>, targets: Targets) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::EmptyDataset("batch has no rows".into()));
        }
        if inputs.nrows() != targets.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.nrows(),
                got: targets.len(),
                context: "batch target rows",
            });
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    fn check(&self, arch: &Architecture) -> Result<()> {
        if self.inputs.ncols() != arch.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: arch.input_dim(),
                got: self.inputs.ncols(),
                context: "batch input columns",
            });
        }
        match (&self.targets, arch.task()) {
            (Targets::Continuous(y), Task::Regression) => {
                if y.ncols() != arch.output_dim() {
                    return Err(Error::DimensionMismatch {
                        expected: arch.output_dim(),
                        got: y.ncols(),
                        context: "regression target columns",
                    });
                }
            }
            (Targets::Labels { labels, .. }, Task::Classification) => {
                if let Some(&bad) = labels.iter().find(|&&l| l >= arch.output_dim()) {
                    return Err(Error::DimensionMismatch {
                        expected: arch.output_dim(),
                        got: bad,
                        context: "class label outside output range",
                    });
                }
            }
            _ => {
                return Err(Error::InvalidConfig(
                    "batch targets do not match architecture task".into(),
                ))
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodSpec {
    /// Observation noise variance σ_n² (regression only).
    pub noise_variance: f64,
    /// Isotropic Gaussian weight prior variance σ_w².
    pub prior_variance: f64,
}

impl Default for LikelihoodSpec {
    fn default() -> Self {
        Self {
            noise_variance: 0.1,
            prior_variance: 1.0,
        }
    }
}

impl LikelihoodSpec {
    pub fn new(noise_variance: f64, prior_variance: f64) -> Result<Self> {
        let spec = Self {
            noise_variance,
            prior_variance,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_variance > 0.0 && self.noise_variance.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "noise variance must be positive, got {}",
                self.noise_variance
            )));
        }
        if !(self.prior_variance > 0.0 && self.prior_variance.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "prior variance must be positive, got {}",
                self.prior_variance
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitMode {
    /// Every entry drawn from the weight prior N(0, σ_w²).
    PriorSample,
    /// Weights from N(0, 2 / fan_in), zero biases.
    KaimingLike,
}

pub fn init_params(arch: &Arc<Architecture>, seed: u64, mode: InitMode, prior_variance: f64) -> ModelParams {
    let mut rng = rng_from_seed(seed);
    let mut values = vec![0.0; arch.parameter_count()];
    match mode {
        InitMode::PriorSample => {
            let normal = Normal::new(0.0, prior_variance.sqrt()).expect("positive prior variance");
            for v in &mut values {
                *v = normal.sample(&mut rng);
            }
        }
        InitMode::KaimingLike => {
            for slot in arch.slots() {
                let normal = Normal::new(0.0, (2.0 / slot.fan_in as f64).sqrt()).expect("positive fan-in");
                for v in &mut values[slot.offset..slot.bias_offset()] {
                    *v = normal.sample(&mut rng);
                }
            }
        }
    }
    ModelParams {
        values,
        arch: Arc::clone(arch),
    }
}

fn relu_inplace(z: &mut Array2<f64>) {
    z.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
}

/// Raw network outputs (`b × output_dim`) for a batch of inputs.
pub fn forward(params: &ModelParams, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let arch = params.arch();
    if inputs.ncols() != arch.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: arch.input_dim(),
            got: inputs.ncols(),
            context: "forward input columns",
        });
    }
    let slots = arch.slots();
    let last = slots.len() - 1;
    let mut act: Option<Array2<f64>> = None;
    for (l, slot) in slots.iter().enumerate() {
        let (w, b) = params.layer(slot);
        let mut z = match &act {
            None => inputs.dot(&w.t()),
            Some(a) => a.dot(&w.t()),
        };
        z += &b;
        if l != last {
            relu_inplace(&mut z);
        }
        act = Some(z);
    }
    Ok(act.expect("at least one layer"))
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Value and analytic gradient of the rescaled minibatch negative log-posterior.
///
/// `total_n` is the full local dataset size; the data term is multiplied by
/// `total_n / b` so that its expectation over minibatches is the full-data sum.
pub fn neg_log_posterior_grad(
    params: &ModelParams,
    batch: &Batch,
    lik: &LikelihoodSpec,
    total_n: usize,
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; params.len()];
    let value = neg_log_posterior_grad_into(params.arch(), params.values(), batch, lik, total_n, &mut grad)?;
    Ok((value, grad))
}

/// Same as [`neg_log_posterior_grad`] over a raw parameter slice, writing the
/// gradient into `grad`.
pub fn neg_log_posterior_grad_into(
    arch: &Architecture,
    values: &[f64],
    batch: &Batch,
    lik: &LikelihoodSpec,
    total_n: usize,
    grad: &mut [f64],
) -> Result<f64> {
    batch.check(arch)?;
    if values.len() != arch.parameter_count() || grad.len() != values.len() {
        return Err(Error::DimensionMismatch {
            expected: arch.parameter_count(),
            got: values.len().min(grad.len()),
            context: "parameter or gradient length",
        });
    }
    if total_n == 0 {
        return Err(Error::InvalidConfig("total_n must be positive".into()));
    }
    let scale = total_n as f64 / batch.len() as f64;
    let slots = arch.slots();
    let last = slots.len() - 1;

    // activations[l] is the input to layer l.
    let mut activations: Vec<Array2<f64>> = Vec::with_capacity(slots.len());
    activations.push(batch.inputs.clone());
    let mut out = Array2::zeros((0, 0));
    for (l, slot) in slots.iter().enumerate() {
        let (w, b) = layer_views(values, slot);
        let mut z = activations[l].dot(&w.t());
        z += &b;
        if l != last {
            relu_inplace(&mut z);
            activations.push(z);
        } else {
            out = z;
        }
    }
    let (data_nll, mut delta) = match &batch.targets {
        Targets::Continuous(y) => {
            let var = lik.noise_variance;
            let resid = &out - y;
            let log_norm = 0.5 * (2.0 * std::f64::consts::PI * var).ln();
            let nll: f64 = resid.iter().map(|r| r * r / (2.0 * var) + log_norm).sum();
            (nll, resid / var)
        }
        Targets::Labels { labels, .. } => {
            let mut nll = 0.0;
            let mut delta = Array2::zeros(out.raw_dim());
            for (r, (row, &label)) in out.outer_iter().zip(labels).enumerate() {
                let logits = row.to_vec();
                let lse = log_sum_exp(&logits);
                nll += lse - logits[label];
                for (k, &z) in logits.iter().enumerate() {
                    delta[[r, k]] = (z - lse).exp();
                }
                delta[[r, label]] -= 1.0;
            }
            (nll, delta)
        }
    };
    delta *= scale;

    for l in (0..slots.len()).rev() {
        let slot = &slots[l];
        let a = &activations[l];
        let gw = delta.t().dot(a);
        let gb = delta.sum_axis(Axis(0));
        // Logical (row-major) order, whatever the memory layout of the product.
        for (g, v) in grad[slot.offset..slot.bias_offset()].iter_mut().zip(gw.iter()) {
            *g = *v;
        }
        for (g, v) in grad[slot.bias_offset()..slot.offset + slot.len()]
            .iter_mut()
            .zip(gb.iter())
        {
            *g = *v;
        }
        if l > 0 {
            let (w, _) = layer_views(values, slot);
            let mut prev = delta.dot(&w);
            ndarray::Zip::from(&mut prev).and(a).for_each(|d, &act| {
                if act <= 0.0 {
                    *d = 0.0;
                }
            });
            delta = prev;
        }
    }

    let inv_prior = 1.0 / lik.prior_variance;
    let mut sq = 0.0;
    for (g, &w) in grad.iter_mut().zip(values) {
        *g += w * inv_prior;
        sq += w * w;
    }
    let value = scale * data_nll + 0.5 * sq * inv_prior;

    if !value.is_finite() {
        return Err(Error::Divergence(format!(
            "negative log-posterior is not finite ({value})"
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Divergence(format!("gradient entry {i} is not finite")));
    }
    Ok(value)
}

/// Convenience row view of a single input vector.
pub fn forward_one(params: &ModelParams, x: &[f64]) -> Result<Array1<f64>> {
    let view = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
    Ok(forward(params, view)?.row(0).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn arch(sizes: &[usize], task: Task) -> Arc<Architecture> {
        Arc::new(Architecture::new(sizes.to_vec(), Activation::Relu, task).unwrap())
    }

    #[test]
    fn parameter_count_small_net() {
        let a = arch(&[2, 3, 1], Task::Regression);
        assert_eq!(a.parameter_count(), 2 * 3 + 3 + 3 + 1);
        let p = init_params(&a, 1, InitMode::PriorSample, 1.0);
        assert_eq!(p.len(), 13);
    }

    #[test]
    fn rejects_bad_architectures() {
        assert!(Architecture::new(vec![3], Activation::Relu, Task::Regression).is_err());
        assert!(Architecture::new(vec![3, 0, 1], Activation::Relu, Task::Regression).is_err());
        assert!(Architecture::new(vec![3, 1], Activation::Relu, Task::Classification).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = arch(&[4, 8, 3], Task::Classification);
        for mode in [InitMode::PriorSample, InitMode::KaimingLike] {
            let p = init_params(&a, 42, mode, 1.0);
            let q = init_params(&a, 42, mode, 1.0);
            assert_eq!(p.values(), q.values());
        }
    }

    #[test]
    fn prior_sample_variance_concentrates() {
        // 100 * 99 + 99 + 99 + 1 = 10099 parameters.
        let a = arch(&[100, 99, 1], Task::Regression);
        let p = init_params(&a, 3, InitMode::PriorSample, 1.0);
        let n = p.len() as f64;
        let mean = p.values().iter().sum::<f64>() / n;
        let var = p.values().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((0.9..=1.1).contains(&var), "variance {var}");
    }

    #[test]
    fn kaiming_has_zero_biases() {
        let a = arch(&[5, 7, 2], Task::Classification);
        let p = init_params(&a, 9, InitMode::KaimingLike, 1.0);
        for slot in a.slots() {
            assert!(p.values()[slot.bias_offset()..slot.offset + slot.len()]
                .iter()
                .all(|&b| b == 0.0));
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let a = arch(&[3, 4, 2], Task::Regression);
        let p = ModelParams::zeros(a);
        let x = array![[1.0, -2.0, 3.0], [0.5, 0.5, 0.5]];
        let out = forward(&p, x.view()).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_linear_layer() {
        let a = arch(&[2, 2], Task::Regression);
        let p = ModelParams::new(a, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let x = array![[3.5, -1.25]];
        let out = forward(&p, x.view()).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let a = arch(&[3, 2], Task::Regression);
        let p = ModelParams::zeros(a);
        let x = array![[1.0, 2.0]];
        assert!(matches!(
            forward(&p, x.view()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn model_params_reject_non_finite() {
        let a = arch(&[1, 1], Task::Regression);
        assert!(ModelParams::new(a.clone(), vec![f64::NAN, 0.0]).is_err());
        assert!(ModelParams::new(a, vec![0.0]).is_err());
    }

    #[test]
    fn softmax_cases() {
        let p = softmax(&[0.0, 0.0, 0.0]);
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&[1000.0, 0.0]);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-15);
        assert!(p[1] < 1e-300);

        let logits = [1.0f64, 2.0, 3.0];
        let denom: f64 = logits.iter().map(|z| z.exp()).sum();
        let p = softmax(&logits);
        for (pi, z) in p.iter().zip(logits) {
            assert!((pi - z.exp() / denom).abs() < 1e-12);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_batch_rescale_is_one() {
        let a = arch(&[1, 1], Task::Regression);
        let p = ModelParams::new(a, vec![2.0, 0.5]).unwrap();
        let batch = Batch::new(array![[1.0], [2.0]], Targets::Continuous(array![[1.0], [3.0]])).unwrap();
        let lik = LikelihoodSpec::new(1.0, 4.0).unwrap();
        let (value, _) = neg_log_posterior_grad(&p, &batch, &lik, 2).unwrap();
        // residuals 1.5, 1.5 ; prior ||w||²=4.25
        let expected = 2.0 * (1.5f64.powi(2) / 2.0 + 0.5 * (2.0 * std::f64::consts::PI).ln()) + 4.25 / 8.0;
        assert!((value - expected).abs() < 1e-12);
        let (doubled, _) = neg_log_posterior_grad(&p, &batch, &lik, 4).unwrap();
        assert!((doubled - 4.25 / 8.0 - 2.0 * (expected - 4.25 / 8.0)).abs() < 1e-12);
    }

    #[test]
    fn mismatched_task_is_rejected() {
        let a = arch(&[1, 2], Task::Classification);
        let p = ModelParams::zeros(a);
        let batch = Batch::new(array![[1.0]], Targets::Continuous(array![[1.0, 0.0]])).unwrap();
        assert!(neg_log_posterior_grad(&p, &batch, &LikelihoodSpec::default(), 1).is_err());
    }
}
