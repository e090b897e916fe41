//! Monte Carlo ensembles: density estimates of `u(t, x)`, the Varadhan sweep, tilted
//! tail estimates and the support-approximation experiments.
//!
//! Replica `r` always uses noise stream `first_stream + r`, and every reduction runs
//! sequentially over the replicas in order, so results do not depend on the thread count.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kde::{density_at, silverman_bandwidth, weighted_density_at};
use crate::noise::{localization_holds, smooth_vn, ControlH, GridSpec};
use crate::skeleton::Skeleton;
use crate::solver::{ModelSpec, Observation, Propagator};

/// Smallest ensemble accepted by the density estimators.
pub const MIN_REPLICAS: usize = 1000;
/// Smallest effective sample size accepted from a tilted estimate.
pub const MIN_ESS: f64 = 50.0;

/// Endpoint value of one replica with the log-likelihood ratio of its shift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub u: f64,
    pub log_weight: f64,
}

/// Simulates `n` replicas of `u(t, x)` at noise level `eps`, driven by the path shifted
/// by `eps^{-1} h` when `h` is given.
pub fn endpoint_samples(
    prop: &Propagator,
    obs: &Observation,
    eps: f64,
    n: usize,
    h: Option<&ControlH>,
    first_stream: u64,
) -> Result<Vec<Sample>> {
    if let Some(h) = h {
        prop.check_control(h)?;
    }
    let norm_sq = h.map_or(0.0, |h| h.norm_sq());
    (0..n as u64)
        .into_par_iter()
        .map(|r| {
            let path = prop.sample_path(first_stream + r);
            let c = prop.drive_coeffs(Some(&path), eps, h)?;
            let u = prop.endpoint(&c, obs)?;
            let log_weight = match h {
                Some(h) => {
                    let hw: f64 = h.coeffs().iter().zip(path.increments()).map(|(a, b)| a * b).sum();
                    -hw / eps - 0.5 * norm_sq / (eps * eps)
                }
                None => 0.0,
            };
            Ok(Sample { u, log_weight })
        })
        .collect()
}

/// Estimated density of `u(t, x)` on a grid of values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityCurve {
    pub eps: f64,
    pub y_grid: Vec<f64>,
    pub p_hat: Vec<f64>,
    pub se: Vec<f64>,
    pub log_p: Vec<f64>,
    /// delta-method error of `log_p`
    pub log_se: Vec<f64>,
    pub bandwidth: f64,
    pub n: usize,
}

impl DensityCurve {
    /// KDE of `samples` at `y_grid`; `log_p` is `NaN` where `p_hat <= 3 se`.
    pub fn from_samples(eps: f64, samples: &[f64], y_grid: &[f64], bandwidth: Option<f64>) -> Result<Self> {
        let bandwidth = match bandwidth {
            Some(b) if b > 0.0 => b,
            Some(b) => return Err(Error::InvalidInput(format!("bandwidth must be positive, got {b}"))),
            None => silverman_bandwidth(samples)?,
        };
        let (mut p_hat, mut se, mut log_p, mut log_se) = (vec![], vec![], vec![], vec![]);
        for &y in y_grid {
            let (p, s) = density_at(samples, bandwidth, y);
            p_hat.push(p);
            se.push(s);
            if p > 3.0 * s {
                log_p.push(p.ln());
                log_se.push(s / p);
            } else {
                log_p.push(f64::NAN);
                log_se.push(f64::NAN);
            }
        }
        Ok(Self { eps, y_grid: y_grid.to_vec(), p_hat, se, log_p, log_se, bandwidth, n: samples.len() })
    }

    /// Trapezoidal mass of `p_hat` over the grid.
    pub fn captured_mass(&self) -> f64 {
        self.y_grid.windows(2).zip(self.p_hat.windows(2)).map(|(y, p)| 0.5 * (y[1] - y[0]) * (p[0] + p[1])).sum()
    }

    /// CSV columns `eps, y, p_hat, se, log_p, log_se`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["eps", "y", "p_hat", "se", "log_p", "log_se"])?;
        for i in 0..self.y_grid.len() {
            w.write_record(&[
                self.eps.to_string(),
                self.y_grid[i].to_string(),
                self.p_hat[i].to_string(),
                self.se[i].to_string(),
                self.log_p[i].to_string(),
                self.log_se[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_replicas(n: usize) -> Result<()> {
    if n < MIN_REPLICAS {
        return Err(Error::InvalidInput(format!("need at least {MIN_REPLICAS} replicas, got {n}")));
    }
    Ok(())
}

/// KDE of `u^eps(t, x)` from `n` replicas.
pub fn estimate_density(
    model: &ModelSpec,
    grid: &GridSpec,
    obs: &Observation,
    n: usize,
    y_grid: &[f64],
    bandwidth: Option<f64>,
) -> Result<DensityCurve> {
    check_replicas(n)?;
    let prop = Propagator::new(model, grid)?;
    let samples: Vec<f64> = endpoint_samples(&prop, obs, model.eps, n, None, 0)?.iter().map(|s| s.u).collect();
    DensityCurve::from_samples(model.eps, &samples, y_grid, bandwidth)
}

/// Importance-sampled density at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TiltedEstimate {
    pub p_hat: f64,
    pub se: f64,
    pub ess: f64,
    pub bandwidth: f64,
    pub mean_weight: f64,
    pub mean_weight_se: f64,
}

/// Density at `y` from samples simulated under a shift, reweighted by their likelihood
/// ratios. Fails with [`Error::PoorTilt`] when the effective sample size is below
/// [`MIN_ESS`].
pub fn tilted_from_samples(samples: &[Sample], y: f64, bandwidth: Option<f64>) -> Result<TiltedEstimate> {
    let u: Vec<f64> = samples.iter().map(|s| s.u).collect();
    let lw: Vec<f64> = samples.iter().map(|s| s.log_weight).collect();
    let bandwidth = match bandwidth {
        Some(b) => b,
        None => silverman_bandwidth(&u)?,
    };
    let (p_hat, se, ess) = weighted_density_at(&u, &lw, bandwidth, y);
    if ess < MIN_ESS {
        return Err(Error::PoorTilt { ess, min: MIN_ESS });
    }
    let w: Vec<f64> = lw.iter().map(|l| l.exp()).collect();
    let (mean_weight, mean_weight_se) = crate::kde::batch_mean(&w);
    Ok(TiltedEstimate { p_hat, se, ess, bandwidth, mean_weight, mean_weight_se })
}

/// Density of `u^eps(t, x)` at `y` estimated under the shift `eps^{-1} h_star`.
pub fn tilted_density(
    model: &ModelSpec,
    grid: &GridSpec,
    obs: &Observation,
    n: usize,
    y: f64,
    h_star: &ControlH,
    eps: f64,
) -> Result<TiltedEstimate> {
    check_replicas(n)?;
    let model = model.with_eps(eps);
    let prop = Propagator::new(&model, grid)?;
    let samples = endpoint_samples(&prop, obs, eps, n, Some(h_star), 0)?;
    tilted_from_samples(&samples, y, None)
}

/// One noise level of the Varadhan sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VaradhanRow {
    pub eps: f64,
    pub y: f64,
    pub p_hat: f64,
    pub se: f64,
    pub log_p: f64,
    pub eps2_log_p: f64,
    /// `eps^2` times the delta-method error of `log_p`
    pub eps2_se: f64,
    pub minus_i: f64,
    pub gap: f64,
    pub ess: f64,
    /// estimate below its noise floor or poorly tilted; excluded from extrapolation
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VaradhanTable {
    pub y: f64,
    pub rate: f64,
    pub rows: Vec<VaradhanRow>,
    /// limit of `eps^2 log p` from the fit on `{1, eps^2, eps^2 log eps^2}`
    pub extrapolated: Option<f64>,
    /// `eps^2 log p` at the smallest unflagged `eps`
    pub raw: Option<f64>,
    /// `|extrapolated + I| / I`
    pub relative_deviation: Option<f64>,
}

impl VaradhanTable {
    /// CSV columns `eps, y, p_hat, se, log_p, eps2_log_p, minus_I, gap` plus diagnostics.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "eps",
            "y",
            "p_hat",
            "se",
            "log_p",
            "eps2_log_p",
            "minus_I",
            "gap",
            "eps2_se",
            "ess",
            "flagged",
        ])?;
        for r in &self.rows {
            w.write_record(&[
                r.eps.to_string(),
                r.y.to_string(),
                r.p_hat.to_string(),
                r.se.to_string(),
                r.log_p.to_string(),
                r.eps2_log_p.to_string(),
                r.minus_i.to_string(),
                r.gap.to_string(),
                r.eps2_se.to_string(),
                r.ess.to_string(),
                r.flagged.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Least-squares intercept of `v` on `{1, e, e ln e}` with `e = eps^2`.
pub fn extrapolate_eps2(eps: &[f64], v: &[f64]) -> Option<f64> {
    if eps.len() < 3 {
        return None;
    }
    // normal equations of the 3-column design
    let mut a = [[0.0f64; 3]; 3];
    let mut b = [0.0f64; 3];
    for (&e, &y) in eps.iter().zip(v) {
        let e2 = e * e;
        let row = [1.0, e2, e2 * e2.ln()];
        for i in 0..3 {
            b[i] += row[i] * y;
            for j in 0..3 {
                a[i][j] += row[i] * row[j];
            }
        }
    }
    // Gaussian elimination with partial pivoting
    for c in 0..3 {
        let p = (c..3).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))?;
        a.swap(c, p);
        b.swap(c, p);
        if a[c][c].abs() < 1e-300 {
            return None;
        }
        for r in c + 1..3 {
            let f = a[r][c] / a[c][c];
            for k in c..3 {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = [0.0; 3];
    for r in (0..3).rev() {
        let s: f64 = (r + 1..3).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x[0])
}

/// `eps^2 log p^eps(y)` for each `eps` next to `-I(y)`. With `tilt`, each level is
/// estimated under the shift `eps^{-1} tilt`.
#[allow(clippy::too_many_arguments)]
pub fn varadhan_sweep(
    model: &ModelSpec,
    grid: &GridSpec,
    obs: &Observation,
    eps_list: &[f64],
    y: f64,
    rate: f64,
    n: usize,
    tilt: Option<&ControlH>,
) -> Result<VaradhanTable> {
    check_replicas(n)?;
    if eps_list.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidInput("noise levels must be strictly decreasing".into()));
    }
    let mut rows = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let m = model.with_eps(eps);
        let prop = Propagator::new(&m, grid)?;
        let (p_hat, se, ess) = match tilt {
            Some(h) => {
                let samples = endpoint_samples(&prop, obs, eps, n, Some(h), 0)?;
                match tilted_from_samples(&samples, y, None) {
                    Ok(t) => (t.p_hat, t.se, t.ess),
                    Err(Error::PoorTilt { ess, .. }) => (f64::NAN, f64::NAN, ess),
                    Err(e) => return Err(e),
                }
            }
            None => {
                let u: Vec<f64> = endpoint_samples(&prop, obs, eps, n, None, 0)?.iter().map(|s| s.u).collect();
                let bw = silverman_bandwidth(&u)?;
                let (p, s) = density_at(&u, bw, y);
                (p, s, n as f64)
            }
        };
        let flagged = !(p_hat > 3.0 * se) || ess < MIN_ESS;
        let log_p = if p_hat > 0.0 { p_hat.ln() } else { f64::NAN };
        let eps2_log_p = eps * eps * log_p;
        rows.push(VaradhanRow {
            eps,
            y,
            p_hat,
            se,
            log_p,
            eps2_log_p,
            eps2_se: eps * eps * se / p_hat,
            minus_i: -rate,
            gap: eps2_log_p + rate,
            ess,
            flagged,
        });
    }
    let good: Vec<&VaradhanRow> = rows.iter().filter(|r| !r.flagged).collect();
    let e: Vec<f64> = good.iter().map(|r| r.eps).collect();
    let v: Vec<f64> = good.iter().map(|r| r.eps2_log_p).collect();
    let extrapolated = extrapolate_eps2(&e, &v);
    let raw = good.last().map(|r| r.eps2_log_p);
    let relative_deviation = extrapolated.filter(|_| rate > 0.0).map(|x| (x + rate).abs() / rate);
    Ok(VaradhanTable { y, rate, rows, extrapolated, raw, relative_deviation })
}

/// Medians of the two support approximations at one smoothing level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SupportRow {
    pub level: u32,
    /// median `|u(t,x) - Phi^{eps v^n}(t,x)|`
    pub c1_median: f64,
    /// median `|u(t,x; shifted by h - eps v^n) - Phi^h(t,x)|`
    pub c2_median: f64,
    pub kept: usize,
    pub total: usize,
}

/// Runs the support approximations for each level in `levels` over `replicas` replicas,
/// keeping those on which the localization event holds with exponent `theta`.
pub fn support_convergence(
    model: &ModelSpec,
    grid: &GridSpec,
    obs: &Observation,
    h: &ControlH,
    levels: &[u32],
    replicas: usize,
    theta: f64,
) -> Result<Vec<SupportRow>> {
    if levels.is_empty() || levels.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("levels must be non-empty and increasing".into()));
    }
    let sk = Skeleton::new(model, grid, obs)?;
    let prop = sk.propagator();
    prop.check_control(h)?;
    let eps = model.eps;
    let phi_h = sk.endpoint(h)?;
    let per_replica: Vec<Vec<Option<(f64, f64)>>> = (0..replicas as u64)
        .into_par_iter()
        .map(|r| {
            let path = prop.sample_path(r);
            let u = prop.endpoint(&prop.drive_coeffs(Some(&path), eps, None)?, obs)?;
            levels
                .iter()
                .map(|&level| {
                    if !localization_holds(&path, level, theta, obs.t)? {
                        return Ok(None);
                    }
                    let v = smooth_vn(&path, level)?;
                    let c1 = (u - sk.endpoint(&v.scaled(eps))?).abs();
                    let shift = h.axpy(-eps, &v)?;
                    let us = prop.endpoint(&prop.drive_coeffs(Some(&path), eps, Some(&shift))?, obs)?;
                    Ok(Some((c1, (us - phi_h).abs())))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    levels
        .iter()
        .enumerate()
        .map(|(j, &level)| {
            let kept: Vec<(f64, f64)> = per_replica.iter().filter_map(|r| r[j]).collect();
            if kept.is_empty() {
                return Err(Error::EmptyLocalization { level });
            }
            Ok(SupportRow {
                level,
                c1_median: median(kept.iter().map(|p| p.0).collect()),
                c2_median: median(kept.iter().map(|p| p.1).collect()),
                kept: kept.len(),
                total: replicas,
            })
        })
        .collect()
}

pub fn write_support_csv<W: Write>(rows: &[SupportRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Least-squares slope of `log2 value` against `level`.
pub fn log2_slope(levels: &[u32], values: &[f64]) -> f64 {
    let n = levels.len() as f64;
    let x: Vec<f64> = levels.iter().map(|&l| l as f64).collect();
    let y: Vec<f64> = values.iter().map(|v| v.log2()).collect();
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Sample mean and variance with the standard error of each.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Moments {
    pub mean: f64,
    pub mean_se: f64,
    pub var: f64,
    pub var_se: f64,
}

pub fn moments(x: &[f64]) -> Moments {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let m4 = x.iter().map(|a| (a - mean).powi(4)).sum::<f64>() / n;
    Moments { mean, mean_se: (var / n).sqrt(), var, var_se: ((m4 - var * var).max(0.0) / n).sqrt() }
}
