//! Test-set metrics over predictive summaries.

use crate::error::{Error, Result};
use crate::posterior::PredictiveSummary;

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b || a == 0 {
        return Err(Error::DimensionMismatch {
            expected: a,
            got: b,
            context: "metric inputs",
        });
    }
    Ok(())
}

pub fn metric_accuracy(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check_len(probs.len(), labels.len())?;
    let hits = probs.iter().zip(labels).filter(|(p, &l)| argmax(p) == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean squared error over all rows and output dimensions.
pub fn metric_mse(means: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
    check_len(means.len(), targets.len())?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (m, t) in means.iter().zip(targets) {
        check_len(m.len(), t.len())?;
        for (a, b) in m.iter().zip(t) {
            total += (a - b).powi(2);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean Gaussian negative log density, summed over output dimensions.
pub fn metric_gaussian_nll(summaries: &[PredictiveSummary], targets: &[Vec<f64>]) -> Result<f64> {
    check_len(summaries.len(), targets.len())?;
    let mut total = 0.0;
    for (s, y) in summaries.iter().zip(targets) {
        let (mean, var) = s
            .gaussian()
            .ok_or_else(|| Error::InvalidConfig("Gaussian NLL needs regression summaries".into()))?;
        check_len(mean.len(), y.len())?;
        for ((m, v), t) in mean.iter().zip(var).zip(y) {
            total += 0.5 * (2.0 * std::f64::consts::PI * v).ln() + (t - m).powi(2) / (2.0 * v);
        }
    }
    Ok(total / targets.len() as f64)
}

/// Mean `-ln p(true class)` with probabilities floored at `floor`.
pub fn metric_categorical_nll(probs: &[Vec<f64>], labels: &[usize], floor: f64) -> Result<f64> {
    check_len(probs.len(), labels.len())?;
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(p, &l)| -p[l].max(floor).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

/// Expected calibration error with equal-width confidence bins on the
/// maximum probability. Bin `b` covers `(b/B, (b+1)/B]`, with confidence 0
/// assigned to the first bin.
pub fn metric_ece(probs: &[Vec<f64>], labels: &[usize], bins: usize) -> Result<f64> {
    check_len(probs.len(), labels.len())?;
    if bins == 0 {
        return Err(Error::InvalidConfig("ECE needs at least one bin".into()));
    }
    let mut conf_sum = vec![0.0; bins];
    let mut hit_sum = vec![0.0; bins];
    let mut count = vec![0usize; bins];
    for (p, &l) in probs.iter().zip(labels) {
        let pred = argmax(p);
        let conf = p[pred];
        let b = ((conf * bins as f64).ceil() as usize).clamp(1, bins) - 1;
        conf_sum[b] += conf;
        hit_sum[b] += f64::from(u8::from(pred == l));
        count[b] += 1;
    }
    let n = labels.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| (hit_sum[b] - conf_sum[b]).abs() / n)
        .sum())
}
