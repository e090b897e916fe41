//! Gaussian kernel density estimates with batch-means standard errors.

use crate::error::{Error, Result};

/// Number of contiguous batches used for standard errors.
pub const BATCHES: usize = 16;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn gaussian_kernel(v: f64, bandwidth: f64) -> f64 {
    let z = v / bandwidth;
    INV_SQRT_2PI / bandwidth * (-0.5 * z * z).exp()
}

fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, v.sqrt())
}

/// Silverman's rule `1.06 min(sd, IQR / 1.34) N^{-1/5}`.
pub fn silverman_bandwidth(samples: &[f64]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::DegenerateSample("need at least two samples".into()));
    }
    let (_, sd) = mean_sd(samples);
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
    };
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    if !(spread > 0.0) || !spread.is_finite() {
        return Err(Error::DegenerateSample(format!("sample spread is {spread}")));
    }
    Ok(1.06 * spread * (samples.len() as f64).powf(-0.2))
}

/// Mean of per-sample contributions and its batch-means standard error.
pub fn batch_mean(contrib: &[f64]) -> (f64, f64) {
    let n = contrib.len();
    let mean = contrib.iter().sum::<f64>() / n as f64;
    let batches = BATCHES.min(n);
    let size = n / batches;
    let means: Vec<f64> = (0..batches)
        .map(|b| {
            let end = if b + 1 == batches { n } else { (b + 1) * size };
            let chunk = &contrib[b * size..end];
            chunk.iter().sum::<f64>() / chunk.len() as f64
        })
        .collect();
    let (_, sd) = mean_sd(&means);
    (mean, sd / (batches as f64).sqrt())
}

/// `p(y)` and its standard error from unweighted samples.
pub fn density_at(samples: &[f64], bandwidth: f64, y: f64) -> (f64, f64) {
    let c: Vec<f64> = samples.iter().map(|&u| gaussian_kernel(y - u, bandwidth)).collect();
    batch_mean(&c)
}

/// Weighted estimate for samples drawn under a shifted law with log-likelihood ratios
/// `log_weights`. The local exponential trend of the weights, fitted by least squares of
/// `log w` on `u`, is divided out inside the kernel so that the smoothing acts on a flat
/// density. Returns `(p, se, ess)`, the effective sample size being that of the
/// per-sample contributions.
pub fn weighted_density_at(samples: &[f64], log_weights: &[f64], bandwidth: f64, y: f64) -> (f64, f64, f64) {
    let n = samples.len() as f64;
    let mu = samples.iter().sum::<f64>() / n;
    let lw = log_weights.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (&u, &l) in samples.iter().zip(log_weights) {
        sxy += (u - mu) * (l - lw);
        sxx += (u - mu) * (u - mu);
    }
    let slope = if sxx > 0.0 && sxy != 0.0 { sxy / sxx } else { 0.0 };
    let c: Vec<f64> = samples
        .iter()
        .zip(log_weights)
        .map(|(&u, &l)| {
            let v = y - u;
            gaussian_kernel(v, bandwidth) * (l + slope * v).exp()
        })
        .collect();
    let (p, se) = batch_mean(&c);
    let s1: f64 = c.iter().sum();
    let s2: f64 = c.iter().map(|a| a * a).sum();
    let ess = if s2 > 0.0 { s1 * s1 / s2 } else { 0.0 };
    (p, se, ess)
}
