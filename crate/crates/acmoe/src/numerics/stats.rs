use crate::error::{Error, Result};

/// Spread statistic for a set of scalar values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpreadMetric {
    /// Mean absolute deviation from the mean, (1/N) sum |x_i - mean|.
    Mad,
    /// Population variance, (1/N) sum (x_i - mean)^2.
    Variance,
}

/// Dispersion of `values` under the given metric.
pub fn dispersion(values: &[f64], metric: SpreadMetric) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput { context: "dispersion of an empty slice".into() });
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let acc = match metric {
        SpreadMetric::Mad => values.iter().map(|v| (v - mean).abs()).sum::<f64>(),
        SpreadMetric::Variance => values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>(),
    };
    Ok(acc / n)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population standard deviation (divides by N, not N-1).
pub fn population_std(values: &[f64]) -> f64 {
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64).sqrt()
}

/// Numerically stable softmax; the output sums to 1 and is invariant to
/// shifting every score by the same constant.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    debug_assert!(!scores.is_empty());
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
