//! Fundamental solutions of the wave and heat operators, the spectral measure of the
//! spatial correlation, and the energy kernels `J1`, `J2` and `g1` derived from them.
//!
//! Fourier transforms use the convention `F f(xi) = int f(x) exp(-2 pi i x.xi) dx`, so the
//! wave multiplier is `sin(2 pi t |xi|) / (2 pi |xi|)` and the heat multiplier is
//! `exp(-4 pi^2 t |xi|^2)`.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::Write;
use std::sync::{Mutex, OnceLock};

use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::quadrature;

/// Absolute tolerance used by every radial quadrature in this module.
pub const QUAD_TOL: f64 = 1e-9;

/// Spatial correlation of the driving noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Correlation {
    /// `Gamma(dx) = |x|^{-beta} dx`, spectral density `|xi|^{-(d-beta)}`.
    Riesz { beta: f64 },
    /// Space-time white noise: Lebesgue spectral measure.
    White,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Operator {
    Wave,
    Heat,
}

/// Correlation, operator and dimension. Construct with [`CovarianceSpec::new`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSpec {
    correlation: Correlation,
    dim: usize,
    operator: Operator,
}

impl CovarianceSpec {
    pub fn new(correlation: Correlation, dim: usize, operator: Operator) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidCovariance("dimension must be at least 1".into()));
        }
        if operator == Operator::Wave && dim > 3 {
            return Err(Error::InvalidCovariance(format!("wave operator needs d <= 3, got {dim}")));
        }
        match correlation {
            Correlation::Riesz { beta } => {
                let upper = (dim as f64).min(2.0);
                if !(beta > 0.0 && beta < upper) {
                    return Err(Error::InvalidCovariance(format!(
                        "Riesz exponent must satisfy 0 < beta < min(d, 2) = {upper}, got {beta}"
                    )));
                }
            }
            Correlation::White => {
                if dim != 1 {
                    return Err(Error::InvalidCovariance(format!(
                        "white noise is only supported in d = 1, got d = {dim}"
                    )));
                }
            }
        }
        Ok(Self { correlation, dim, operator })
    }

    pub fn wave_white() -> Self {
        Self { correlation: Correlation::White, dim: 1, operator: Operator::Wave }
    }

    pub fn correlation(&self) -> Correlation {
        self.correlation
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn operator(&self) -> Operator {
        self.operator
    }

    /// Exponent `a` of the spectral density `|xi|^{a-d}`; white noise is `a = d`.
    pub fn spectral_exponent(&self) -> f64 {
        match self.correlation {
            Correlation::Riesz { beta } => beta,
            Correlation::White => self.dim as f64,
        }
    }

    pub fn is_riesz(&self) -> bool {
        matches!(self.correlation, Correlation::Riesz { .. })
    }
}

/// Power-law exponents of the kernel bounds: `g1(t) >= C t^gamma`, `g1(t) <= C t^eta`,
/// `int_0^t Lambda(s)(R^d) ds <= C t^delta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Exponents {
    pub gamma: f64,
    pub eta: f64,
    pub delta: f64,
}

pub fn exponents(spec: &CovarianceSpec) -> Exponents {
    let a = spec.spectral_exponent();
    match spec.operator {
        Operator::Wave => Exponents { gamma: 3.0 - a, eta: 3.0 - a, delta: 2.0 },
        Operator::Heat => {
            let e = (2.0 - a) / 2.0;
            Exponents { gamma: e, eta: e, delta: 1.0 }
        }
    }
}

/// Density `d mu / d xi` at the frequency `xi`.
pub fn spectral_density(spec: &CovarianceSpec, xi: &[f64]) -> Result<f64> {
    let r = norm(xi);
    spectral_density_radial(spec, r)
}

pub(crate) fn spectral_density_radial(spec: &CovarianceSpec, r: f64) -> Result<f64> {
    match spec.correlation {
        Correlation::White => Ok(1.0),
        Correlation::Riesz { beta } => {
            if r == 0.0 {
                return Err(Error::ZeroModeUndefined);
            }
            Ok(r.powf(-(spec.dim as f64 - beta)))
        }
    }
}

/// Fourier transform of the fundamental solution at time `t`.
pub fn fourier_lambda(spec: &CovarianceSpec, t: f64, xi: &[f64]) -> f64 {
    fourier_lambda_radial(spec.operator, t, norm(xi))
}

pub fn fourier_lambda_radial(op: Operator, t: f64, r: f64) -> f64 {
    match op {
        Operator::Wave => {
            let k = 2.0 * PI * r;
            if k * t == 0.0 {
                t
            } else {
                (k * t).sin() / k
            }
        }
        Operator::Heat => (-4.0 * PI * PI * t * r * r).exp(),
    }
}

/// Time derivative of the wave multiplier, `cos(2 pi t |xi|)`; used for the initial
/// displacement contribution.
pub fn fourier_lambda_dt_wave(t: f64, r: f64) -> f64 {
    (2.0 * PI * t * r).cos()
}

/// Total mass `Lambda(t)(R^d)`.
pub fn j2(spec: &CovarianceSpec, t: f64) -> f64 {
    match spec.operator {
        Operator::Wave => t,
        Operator::Heat => 1.0,
    }
}

/// `int_0^t Lambda(s)(R^d) ds`.
pub fn j2_integral(spec: &CovarianceSpec, t: f64) -> f64 {
    match spec.operator {
        Operator::Wave => 0.5 * t * t,
        Operator::Heat => t,
    }
}

/// `g1(t) = int_0^t J1(s) ds` from the closed-form power law with a cached constant.
pub fn g1(spec: &CovarianceSpec, t: f64) -> Result<f64> {
    if t < 0.0 {
        return Err(Error::InvalidInput(format!("g1 needs t >= 0, got {t}")));
    }
    if t == 0.0 {
        return Ok(0.0);
    }
    let c = g1_constant(spec)?;
    Ok(c * t.powf(exponents(spec).eta))
}

/// `J1(s) = int |F Lambda(s)|^2 d mu`, the derivative of [`g1`].
pub fn j1(spec: &CovarianceSpec, s: f64) -> Result<f64> {
    if s < 0.0 {
        return Err(Error::InvalidInput(format!("J1 needs s >= 0, got {s}")));
    }
    let eta = exponents(spec).eta;
    let c = g1_constant(spec)?;
    if s == 0.0 {
        return Ok(if eta < 1.0 { f64::INFINITY } else { 0.0 });
    }
    Ok(c * eta * s.powf(eta - 1.0))
}

/// Constant `C` in `g1(t) = C t^eta`, computed once per (operator, d, exponent).
pub fn g1_constant(spec: &CovarianceSpec) -> Result<f64> {
    static CACHE: OnceLock<Mutex<HashMap<(Operator, usize, u64), f64>>> = OnceLock::new();
    let key = (spec.operator, spec.dim, spec.spectral_exponent().to_bits());
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(&c) = cache.lock().expect("cache poisoned").get(&key) {
        return Ok(c);
    }
    let c = compute_g1_constant(spec)?;
    cache.lock().expect("cache poisoned").insert(key, c);
    Ok(c)
}

/// Surface area of the unit sphere in `R^d`.
pub fn sphere_area(d: usize) -> f64 {
    let h = d as f64 / 2.0;
    2.0 * PI.powf(h) / gamma(h)
}

fn compute_g1_constant(spec: &CovarianceSpec) -> Result<f64> {
    let a = spec.spectral_exponent();
    let area = sphere_area(spec.dim);
    match spec.operator {
        Operator::Wave => {
            let i = wave_radial_integral(a)?;
            Ok(area / (4.0 * PI * PI) * (2.0 * PI).powf(2.0 - a) * i / (3.0 - a))
        }
        Operator::Heat => {
            let h = heat_radial_integral(a)?;
            let e = 1.0 - a / 2.0;
            Ok(area * (8.0 * PI * PI).powf(-a / 2.0) * h / e)
        }
    }
}

/// `int_0^inf sin^2(x) x^{a-3} dx` for `0 < a < 2`, by quadrature up to `X = 400 pi`
/// plus the asymptotic expansion of the tail.
pub fn wave_radial_integral(a: f64) -> Result<f64> {
    let p = a - 3.0;
    let periods = 800usize;
    let points: Vec<f64> = (0..=periods).map(|k| k as f64 * PI / 2.0).collect();
    let x = *points.last().expect("non-empty");
    let head = quadrature::integrate_breakpoints(
        |x: f64| if x == 0.0 { 0.0 } else { x.sin().powi(2) * x.powf(p) },
        &points,
        QUAD_TOL * 1e-2,
        200_000,
    )?;
    // int_X^inf sin^2 x x^p dx = X^{p+1} / (2 |p+1|) - (1/2) int_X^inf cos(2x) x^p dx and,
    // with sin(2X) = 0, cos(2X) = 1, the cosine tail is -p X^{p-1} / 4 + O(X^{p-2}).
    let tail = 0.5 * x.powf(p + 1.0) / (-(p + 1.0)) + p * x.powf(p - 1.0) / 8.0;
    Ok(head.value + tail)
}

/// `int_0^inf exp(-y^2) y^{a-1} dy` by quadrature (exactly `Gamma(a/2)/2`).
pub fn heat_radial_integral(a: f64) -> Result<f64> {
    let points = [0.0, 1e-6, 1e-4, 1e-2, 0.1, 0.5, 1.0, 2.0, 4.0, 8.0];
    let r = quadrature::integrate_breakpoints(
        |y: f64| if y == 0.0 { 0.0 } else { (-y * y).exp() * y.powf(a - 1.0) },
        &points,
        QUAD_TOL * 1e-2,
        100_000,
    )?;
    Ok(r.value)
}

/// `g1(t)` by direct radial quadrature of `int_0^t |F Lambda(s)|^2 ds` (time integral done
/// in closed form), independent of the power-law scaling used by [`g1`].
pub fn g1_quadrature(spec: &CovarianceSpec, t: f64) -> Result<f64> {
    if t < 0.0 {
        return Err(Error::InvalidInput(format!("g1 needs t >= 0, got {t}")));
    }
    if t == 0.0 {
        return Ok(0.0);
    }
    let a = spec.spectral_exponent();
    let area = sphere_area(spec.dim);
    match spec.operator {
        Operator::Wave => {
            // int_0^t sin^2(2 pi s r) ds = (t/2)(1 - sinc(4 pi t r))
            let omega = 4.0 * PI * t;
            let integrand = |r: f64| {
                if r == 0.0 {
                    return 0.0;
                }
                let z = omega * r;
                let one_minus_sinc = if z < 1e-3 { z * z / 6.0 - z.powi(4) / 120.0 } else { 1.0 - z.sin() / z };
                r.powf(a - 3.0) * 0.5 * t * one_minus_sinc
            };
            // breakpoints every quarter oscillation of sin(omega r), up to omega R = 2000 pi
            let n = 4000usize;
            let dr = PI / (2.0 * omega);
            let points: Vec<f64> = (0..=n).map(|k| k as f64 * dr).collect();
            let r_max = *points.last().expect("non-empty");
            let head = quadrature::integrate_breakpoints(integrand, &points, QUAD_TOL * 1e-2, 400_000)?;
            let q = a - 4.0;
            let tail_mean = 0.5 * t * r_max.powf(a - 2.0) / (2.0 - a);
            // -(t/2) int_R^inf r^{a-4} sin(omega r) / omega dr, with cos(omega R) = 1
            let tail_osc = -0.5 * t / omega * r_max.powf(q) / omega;
            Ok(area / (4.0 * PI * PI) * (head.value + tail_mean + tail_osc))
        }
        Operator::Heat => {
            let k = 8.0 * PI * PI * t;
            let integrand = |r: f64| {
                if r == 0.0 {
                    return 0.0;
                }
                r.powf(a - 3.0) * (-(-k * r * r).exp_m1())
            };
            let r_max = (60.0 / k).sqrt();
            let mut points = vec![0.0];
            for e in (-8..=0).rev() {
                points.push(r_max * 10f64.powi(e));
            }
            let head = quadrature::integrate_breakpoints(integrand, &points, QUAD_TOL * 1e-2, 100_000)?;
            let tail = r_max.powf(a - 2.0) / (2.0 - a);
            Ok(area / (8.0 * PI * PI) * (head.value + tail))
        }
    }
}

/// Least-squares slope of `log g` against `log t`.
pub fn fit_exponent(samples: &[(f64, f64)]) -> Result<f64> {
    if samples.len() < 4 {
        return Err(Error::InvalidInput(format!("exponent fit needs at least 4 samples, got {}", samples.len())));
    }
    if samples.iter().any(|&(t, g)| !(t > 0.0) || !(g > 0.0)) {
        return Err(Error::InvalidInput("exponent fit needs positive times and values".into()));
    }
    let tmin = samples.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
    let tmax = samples.iter().map(|s| s.0).fold(0.0, f64::max);
    if tmax / tmin < 10.0 * (1.0 - 1e-12) {
        return Err(Error::InvalidInput("exponent fit samples must span one decade".into()));
    }
    let n = samples.len() as f64;
    let (sx, sy) = samples.iter().fold((0.0, 0.0), |(a, b), &(t, g)| (a + t.ln(), b + g.ln()));
    let (mx, my) = (sx / n, sy / n);
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for &(t, g) in samples {
        let dx = t.ln() - mx;
        sxy += dx * (g.ln() - my);
        sxx += dx * dx;
    }
    Ok(sxy / sxx)
}

/// Tabulated kernels on a time grid. Immutable after construction.
#[derive(Debug, Clone, Serialize)]
pub struct KernelTable {
    times: Vec<f64>,
    j1: Vec<f64>,
    j2: Vec<f64>,
    g1: Vec<f64>,
    exponents: Exponents,
}

impl KernelTable {
    pub fn build(spec: &CovarianceSpec, times: &[f64]) -> Result<Self> {
        if times.windows(2).any(|w| w[1] <= w[0]) || times.iter().any(|&t| t < 0.0) {
            return Err(Error::InvalidInput("kernel table times must be increasing and >= 0".into()));
        }
        let j1 = times.iter().map(|&t| j1(spec, t)).collect::<Result<Vec<_>>>()?;
        let j2v = times.iter().map(|&t| j2(spec, t)).collect();
        let g1v = times.iter().map(|&t| g1(spec, t)).collect::<Result<Vec<_>>>()?;
        Ok(Self { times: times.to_vec(), j1, j2: j2v, g1: g1v, exponents: exponents(spec) })
    }

    /// Uniform grid `k T / n`, `k = 0..=n`.
    pub fn uniform(spec: &CovarianceSpec, horizon: f64, n: usize) -> Result<Self> {
        let times: Vec<f64> = (0..=n).map(|k| horizon * k as f64 / n as f64).collect();
        Self::build(spec, &times)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn j1(&self) -> &[f64] {
        &self.j1
    }

    pub fn j2(&self) -> &[f64] {
        &self.j2
    }

    pub fn g1(&self) -> &[f64] {
        &self.g1
    }

    pub fn exponents(&self) -> Exponents {
        self.exponents
    }

    /// CSV with columns `t, j1, j2, g1`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "j1", "j2", "g1"])?;
        for i in 0..self.times.len() {
            w.write_record([
                self.times[i].to_string(),
                self.j1[i].to_string(),
                self.j2[i].to_string(),
                self.g1[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn norm(xi: &[f64]) -> f64 {
    xi.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn riesz(beta: f64, d: usize, op: Operator) -> CovarianceSpec {
        CovarianceSpec::new(Correlation::Riesz { beta }, d, op).unwrap()
    }

    #[test]
    fn spectral_density_examples() {
        let s = riesz(1.0, 3, Operator::Wave);
        assert!((spectral_density(&s, &[2.0, 0.0, 0.0]).unwrap() - 0.25).abs() < 1e-15);
        let w = CovarianceSpec::wave_white();
        assert_eq!(spectral_density(&w, &[3.7]).unwrap(), 1.0);
        let s = riesz(0.5, 1, Operator::Heat);
        assert!((spectral_density(&s, &[4.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(spectral_density(&s, &[0.0]), Err(Error::ZeroModeUndefined)));
    }

    #[test]
    fn fourier_lambda_examples() {
        let w = CovarianceSpec::wave_white();
        assert_eq!(fourier_lambda(&w, 0.5, &[0.0]), 0.5);
        assert!((fourier_lambda(&w, 0.25, &[1.0]) - 1.0 / (2.0 * PI)).abs() < 1e-15);
        let h = riesz(0.5, 1, Operator::Heat);
        assert_eq!(fourier_lambda(&h, 3.0, &[0.0]), 1.0);
    }

    #[test]
    fn j2_examples() {
        let w = CovarianceSpec::wave_white();
        assert_eq!(j2(&w, 3.0), 3.0);
        assert_eq!(j2(&w, 0.0), 0.0);
        assert_eq!(j2(&riesz(0.5, 1, Operator::Heat), 0.1), 1.0);
    }

    #[test]
    fn rejects_invalid_specs() {
        assert!(CovarianceSpec::new(Correlation::Riesz { beta: 1.0 }, 1, Operator::Wave).is_err());
        assert!(CovarianceSpec::new(Correlation::Riesz { beta: 2.0 }, 3, Operator::Wave).is_err());
        assert!(CovarianceSpec::new(Correlation::White, 2, Operator::Heat).is_err());
        assert!(CovarianceSpec::new(Correlation::Riesz { beta: 1.0 }, 4, Operator::Wave).is_err());
        assert!(CovarianceSpec::new(Correlation::Riesz { beta: 1.0 }, 4, Operator::Heat).is_ok());
    }

    #[test]
    fn wave_white_g1_is_quarter_t_squared() {
        let w = CovarianceSpec::wave_white();
        assert!((g1(&w, 2.0).unwrap() - 1.0).abs() < 1e-8);
        assert!((g1_quadrature(&w, 2.0).unwrap() - 1.0).abs() < 1e-7);
    }

    #[test]
    fn wave_radial_integral_matches_gamma_closed_form() {
        // int_0^inf x^{m-1} sin^2 x dx = -Gamma(m) cos(m pi / 2) / 2^{m+1}, -2 < m < 0
        for &a in &[0.25, 0.5, 1.5, 1.75] {
            let m: f64 = a - 2.0;
            let exact = -gamma(m) * (m * PI / 2.0).cos() / 2f64.powf(m + 1.0);
            let q = wave_radial_integral(a).unwrap();
            assert!((q - exact).abs() < 1e-8, "a={a}: {q} vs {exact}");
        }
        assert!((wave_radial_integral(1.0).unwrap() - PI / 2.0).abs() < 1e-8);
    }

    #[test]
    fn heat_radial_integral_matches_gamma() {
        for &a in &[0.5, 1.0, 1.5] {
            let q = heat_radial_integral(a).unwrap();
            assert!((q - 0.5 * gamma(a / 2.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn quadrature_agrees_with_power_law() {
        let specs = [
            riesz(0.5, 1, Operator::Wave),
            riesz(1.0, 3, Operator::Wave),
            riesz(1.5, 2, Operator::Wave),
            riesz(0.5, 1, Operator::Heat),
            riesz(1.0, 2, Operator::Heat),
            riesz(1.5, 3, Operator::Heat),
        ];
        for s in &specs {
            for &t in &[0.1, 0.5, 1.0] {
                let closed = g1(s, t).unwrap();
                let quad = g1_quadrature(s, t).unwrap();
                assert!(((quad - closed) / closed).abs() < 1e-3, "{s:?} t={t}: {quad} vs {closed}");
            }
        }
    }

    #[test]
    fn power_law_ratios() {
        let h = riesz(0.5, 1, Operator::Heat);
        let r = g1(&h, 0.8).unwrap() / g1(&h, 0.2).unwrap();
        assert!((r - 4f64.powf(0.75)).abs() < 1e-12);
        let w = riesz(1.0, 3, Operator::Wave);
        let r = g1(&w, 0.6).unwrap() / g1(&w, 0.3).unwrap();
        assert!((r - 4.0).abs() < 1e-12);
    }

    #[test]
    fn fit_exponent_examples() {
        let w = CovarianceSpec::wave_white();
        let ts = [0.1, 0.2, 0.4, 0.7, 1.0];
        let s: Vec<_> = ts.iter().map(|&t| (t, g1_quadrature(&w, t).unwrap())).collect();
        assert!((fit_exponent(&s).unwrap() - 2.0).abs() < 0.01);
        let h = riesz(0.5, 1, Operator::Heat);
        let s: Vec<_> = ts.iter().map(|&t| (t, g1_quadrature(&h, t).unwrap())).collect();
        assert!((fit_exponent(&s).unwrap() - 0.75).abs() < 0.01);
        let s: Vec<_> = ts.iter().map(|&t| (t, 3.0 * t)).collect();
        assert!((fit_exponent(&s).unwrap() - 1.0).abs() < 1e-12);
        assert!(fit_exponent(&[(0.1, 1.0), (0.2, 0.0), (0.5, 1.0), (1.0, 1.0)]).is_err());
        assert!(fit_exponent(&[(0.1, 1.0), (0.2, 1.0), (0.5, 1.0)]).is_err());
    }

    #[test]
    fn kernel_table_invariants_and_csv() {
        for s in [CovarianceSpec::wave_white(), riesz(0.5, 1, Operator::Heat)] {
            let t = KernelTable::uniform(&s, 1.0, 20).unwrap();
            assert_eq!(t.g1()[0], 0.0);
            assert!(t.g1().windows(2).all(|w| w[1] >= w[0]));
            assert!(t.j1().iter().all(|&v| v >= 0.0));
            for (i, &tt) in t.times().iter().enumerate() {
                let want = if s.operator() == Operator::Wave { tt } else { 1.0 };
                assert_eq!(t.j2()[i], want);
            }
            let mut buf = Vec::new();
            t.write_csv(&mut buf).unwrap();
            let text = String::from_utf8(buf).unwrap();
            assert!(text.starts_with("t,j1,j2,g1\n"));
            assert_eq!(text.lines().count(), 22);
        }
    }

    #[test]
    fn j2_integral_exponent_delta() {
        for s in [CovarianceSpec::wave_white(), riesz(0.5, 1, Operator::Heat)] {
            let ts = [0.05, 0.1, 0.3, 0.6, 1.0];
            let samples: Vec<_> = ts.iter().map(|&t| (t, j2_integral(&s, t))).collect();
            assert!((fit_exponent(&samples).unwrap() - exponents(&s).delta).abs() < 1e-12);
        }
    }
}
