//! The rate function `I(y) = inf { ||h||^2 / 2 : Phi^h(t, x) = y }` and the reachable
//! interval of the skeleton.
//!
//! Minimization works in scaled coordinates `z = sqrt(dt) h`, where the `H_T` norm is the
//! Euclidean norm, with an augmented Lagrangian around an L-BFGS inner solve.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::noise::{ControlH, GridSpec};
use crate::optim::{minimize, LbfgsOptions};
use crate::skeleton::Skeleton;
use crate::solver::{ModelSpec, Observation, Propagator};

#[derive(Debug, Clone, Copy)]
pub struct RateOptions {
    /// margin used when bracketing the target
    pub alpha: f64,
    /// constraint tolerance; defaults to `1e-6 sqrt(g1(t))`
    pub tol_c: Option<f64>,
    pub stationarity_tol: f64,
    pub max_outer: usize,
    /// perturbed restarts besides the unperturbed start
    pub starts: usize,
    /// relative size of restart perturbations
    pub perturbation: f64,
    pub seed: u64,
    pub lbfgs: LbfgsOptions,
}

impl Default for RateOptions {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            tol_c: None,
            stationarity_tol: 1e-4,
            max_outer: 40,
            starts: 3,
            perturbation: 0.3,
            seed: 0,
            lbfgs: LbfgsOptions { max_iter: 300, ..Default::default() },
        }
    }
}

#[derive(Debug, Clone)]
pub struct RateResult {
    pub y: f64,
    /// `I(y)`
    pub rate: f64,
    pub h_star: ControlH,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub gamma_bar: f64,
    pub multiplier: f64,
    /// `||h + lambda G|| / ||h||`
    pub stationarity: f64,
    /// relative spread of `I` across starts
    pub start_spread: f64,
    /// starts disagree by more than 1%, or the profile was locally not quasi-convex
    pub flagged: bool,
}

#[derive(Serialize)]
struct ProfileRow {
    y: f64,
    #[serde(rename = "I")]
    rate: f64,
    residual: f64,
    iterations: usize,
    gamma_bar: f64,
    converged: bool,
    flagged: bool,
}

/// Profile CSV: `y, I, residual, iterations, gamma_bar, converged, flagged`.
pub fn write_profile_csv<W: Write>(results: &[RateResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in results {
        w.serialize(ProfileRow {
            y: r.y,
            rate: r.rate,
            residual: r.residual,
            iterations: r.iterations,
            gamma_bar: r.gamma_bar,
            converged: r.converged,
            flagged: r.flagged,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Rate-function machinery bound to one (model, grid, observation point).
#[derive(Debug, Clone)]
pub struct RateSolver {
    sk: Skeleton,
    opts: RateOptions,
    tol_c: f64,
    phi0: f64,
    /// `Lambda(t - ., x - *) sigma(Phi^0)` in `H_T`
    direction: ControlH,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl RateSolver {
    pub fn new(model: &ModelSpec, grid: &GridSpec, obs: &Observation, opts: RateOptions) -> Result<Self> {
        let prop = Propagator::new(model, grid)?;
        Self::from_propagator(prop, obs, opts)
    }

    pub fn from_propagator(prop: Propagator, obs: &Observation, opts: RateOptions) -> Result<Self> {
        let g1 = prop.discrete_g1(obs.time_index, obs.time_index);
        let tol_c = opts.tol_c.unwrap_or(1e-6 * g1.sqrt());
        let sk = Skeleton::from_propagator(prop, obs);
        let traj = sk.skeleton_trajectory(&sk.zero_control())?;
        let phi0 = traj.u[obs.time_index][obs.point_index];
        let direction = sk.propagator().to_control(sk.propagator().adjoint(&traj, obs.point_index, true)?);
        Ok(Self { sk, opts, tol_c, phi0, direction })
    }

    pub fn skeleton(&self) -> &Skeleton {
        &self.sk
    }

    pub fn phi0(&self) -> f64 {
        self.phi0
    }

    pub fn tol_c(&self) -> f64 {
        self.tol_c
    }

    /// Controls `(+h, -h)` with `Phi^{-h} < z < Phi^{+h}`, built by scaling the
    /// `Lambda sigma(Phi^0)` direction by `(|z| + alpha + I2 + |w(t,x)|) / I1`.
    pub fn init_shift(&self, z: f64, alpha: f64) -> Result<(ControlH, ControlH)> {
        if !(alpha > 0.0) {
            return Err(Error::InvalidInput(format!("bracket margin must be positive, got {alpha}")));
        }
        let prop = self.sk.propagator();
        let model = prop.model();
        let obs = self.sk.observation();
        let n = obs.time_index;
        let i1 = model.sigma0 * model.sigma0 * prop.discrete_g1(n, n);
        let i2 = model.drift.sup_abs() * prop.discrete_mass_integral(n);
        let w = prop.w(n)[obs.point_index];
        let scale = (z.abs() + alpha + i2 + w.abs()) / i1;
        let plus = self.direction.scaled(scale);
        let minus = self.direction.scaled(-scale);
        let up = self.sk.endpoint(&plus)?;
        let down = self.sk.endpoint(&minus)?;
        if !(down < z && z < up) {
            return Err(Error::Bracket(format!("Phi(-h) = {down}, Phi(+h) = {up} do not bracket {z}")));
        }
        Ok((plus, minus))
    }

    /// Point on the segment `[-h, +h]` of the bracketing controls where `Phi` crosses `y`.
    pub fn bisection_start(&self, y: f64) -> Result<ControlH> {
        let (plus, _) = self.init_shift(y, self.opts.alpha)?;
        let (mut lo, mut hi) = (-1.0, 1.0);
        let mut mid = 0.0;
        for _ in 0..200 {
            mid = 0.5 * (lo + hi);
            let v = self.sk.endpoint(&plus.scaled(mid))? - y;
            if v.abs() < 0.1 * self.tol_c {
                break;
            }
            if v < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(plus.scaled(mid))
    }

    /// Augmented-Lagrangian solve from one start.
    pub fn solve_from(&self, y: f64, start: &ControlH) -> Result<RateResult> {
        let prop = self.sk.propagator();
        let sqdt = prop.grid().dt().sqrt();
        let to_h = |z: &[f64]| prop.to_control(z.iter().map(|v| v / sqdt).collect());
        let eval = |z: &[f64]| -> Result<(f64, Vec<f64>)> {
            let (v, g) = self.sk.value_and_gradient(&to_h(z))?;
            Ok((v, g.coeffs().iter().map(|c| c * sqdt).collect()))
        };
        let mut z: Vec<f64> = start.coeffs().iter().map(|v| v * sqdt).collect();
        let (v0, g0) = eval(&z)?;
        let g0n = dot(&g0, &g0);
        if g0n <= 0.0 {
            return Err(Error::DegenerateSample("skeleton gradient vanishes at the start".into()));
        }
        let mut lambda = -dot(&z, &g0) / g0n;
        let mut mu = 10.0 / g0n;
        let mut c_prev = (v0 - y).abs();
        let mut iterations = 0;
        let zscale = dot(&z, &z).sqrt().max(1e-8);
        let mut last = (v0, g0);
        let mut stationarity = f64::INFINITY;
        let mut converged = false;
        for _ in 0..self.opts.max_outer {
            let (l, m) = (lambda, mu);
            let objective = |zz: &[f64]| -> Result<(f64, Vec<f64>)> {
                let (v, g) = eval(zz)?;
                let c = v - y;
                let val = 0.5 * dot(zz, zz) + l * c + 0.5 * m * c * c;
                let coef = l + m * c;
                Ok((val, zz.iter().zip(&g).map(|(a, b)| a + coef * b).collect()))
            };
            let lb = LbfgsOptions { grad_tol: 1e-7 * zscale, ..self.opts.lbfgs };
            let min = minimize(objective, z, &lb)?;
            iterations += min.iterations;
            z = min.x;
            last = eval(&z)?;
            let c = last.0 - y;
            lambda += mu * c;
            let zn = dot(&z, &z).sqrt();
            let r: Vec<f64> = z.iter().zip(&last.1).map(|(a, b)| a + lambda * b).collect();
            stationarity = dot(&r, &r).sqrt() / zn.max(1e-300);
            if c.abs() < self.tol_c && stationarity < self.opts.stationarity_tol {
                converged = true;
                break;
            }
            if c.abs() > 0.25 * c_prev {
                mu *= 10.0;
            }
            c_prev = c.abs();
        }
        let h_star = to_h(&z);
        Ok(RateResult {
            y,
            rate: 0.5 * dot(&z, &z),
            residual: (last.0 - y).abs(),
            iterations,
            converged,
            gamma_bar: dot(&last.1, &last.1),
            multiplier: lambda,
            stationarity,
            start_spread: 0.0,
            flagged: false,
            h_star,
        })
    }

    fn trivial(&self, y: f64) -> Result<RateResult> {
        let h = self.sk.zero_control();
        let (v, g) = self.sk.value_and_gradient(&h)?;
        Ok(RateResult {
            y,
            rate: 0.0,
            residual: (v - y).abs(),
            iterations: 0,
            converged: true,
            gamma_bar: g.norm_sq(),
            multiplier: 0.0,
            stationarity: 0.0,
            start_spread: 0.0,
            flagged: false,
            h_star: h,
        })
    }

    /// Best of the bisection start, the given extra starts and the perturbed restarts.
    pub fn rate_with_starts(&self, y: f64, extra: &[ControlH]) -> Result<RateResult> {
        if (y - self.phi0).abs() < self.tol_c {
            return self.trivial(y);
        }
        let base = self.bisection_start(y)?;
        let mut starts = vec![base.clone()];
        starts.extend(extra.iter().cloned());
        let mut rng = ChaCha8Rng::seed_from_u64(self.opts.seed ^ y.to_bits());
        for _ in 0..self.opts.starts {
            let p = ControlH::random(
                base.nt(),
                base.nk(),
                base.n_modes(),
                base.dt(),
                self.opts.perturbation * base.norm(),
                &mut rng,
            );
            starts.push(base.axpy(1.0, &p)?);
        }
        let mut results = Vec::with_capacity(starts.len());
        for s in &starts {
            results.push(self.solve_from(y, s)?);
        }
        let conv: Vec<f64> = results.iter().filter(|r| r.converged).map(|r| r.rate).collect();
        let spread = if conv.len() > 1 {
            let lo = conv.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = conv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (hi - lo) / lo.max(1e-300)
        } else {
            0.0
        };
        let iterations: usize = results.iter().map(|r| r.iterations).sum();
        let mut best = results
            .into_iter()
            .min_by(|a, b| (!a.converged, a.rate).partial_cmp(&(!b.converged, b.rate)).expect("finite rates"))
            .expect("at least one start");
        best.iterations = iterations;
        best.start_spread = spread;
        best.flagged = spread > 0.01;
        Ok(best)
    }

    /// `I(y)`.
    pub fn rate(&self, y: f64) -> Result<RateResult> {
        self.rate_with_starts(y, &[])
    }

    /// `I` on a sorted grid, sweeping outward from the point nearest `Phi^0` and warm
    /// starting each target from its inner neighbour. Entries breaking quasi-convexity
    /// are recomputed with more restarts and flagged.
    pub fn profile(&self, y_grid: &[f64]) -> Result<Vec<RateResult>> {
        if y_grid.is_empty() || y_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput("target grid must be non-empty and strictly increasing".into()));
        }
        let center = (0..y_grid.len())
            .min_by(|&a, &b| (y_grid[a] - self.phi0).abs().total_cmp(&(y_grid[b] - self.phi0).abs()))
            .expect("non-empty");
        let mut out: Vec<Option<RateResult>> = vec![None; y_grid.len()];
        out[center] = Some(self.rate(y_grid[center])?);
        for i in (0..center).rev().chain(center + 1..y_grid.len()) {
            let inner = if i < center { i + 1 } else { i - 1 };
            let warm = out[inner].as_ref().filter(|r| r.converged && r.rate > 0.0).map(|r| r.h_star.clone());
            out[i] = Some(self.rate_with_starts(y_grid[i], warm.as_slice())?);
        }
        let mut out: Vec<RateResult> = out.into_iter().map(|r| r.expect("filled")).collect();
        let argmin = (0..out.len()).min_by(|&a, &b| out[a].rate.total_cmp(&out[b].rate)).expect("non-empty");
        for i in 0..out.len() {
            let inner = if i < argmin {
                i + 1
            } else if i > argmin {
                i - 1
            } else {
                continue;
            };
            if out[i].rate < out[inner].rate {
                let wider =
                    RateSolver { opts: RateOptions { starts: 2 * self.opts.starts + 3, ..self.opts }, ..self.clone() };
                let mut again = wider.rate_with_starts(y_grid[i], &[out[inner].h_star.clone()])?;
                if again.rate > out[i].rate {
                    again = out[i].clone();
                }
                again.flagged = true;
                out[i] = again;
            }
        }
        Ok(out)
    }

    /// `[min, max]` of `Phi^h(t, x)` over controls with `||h||^2 / 2 <= budget`: the
    /// bracketing direction, `n_controls` random controls, then projected gradient steps
    /// from the best candidates on each side.
    pub fn support_probe(&self, n_controls: usize, budget: f64, seed: u64) -> Result<(f64, f64)> {
        if !(budget >= 0.0) {
            return Err(Error::InvalidInput(format!("budget must be non-negative, got {budget}")));
        }
        if budget == 0.0 {
            return Ok((self.phi0, self.phi0));
        }
        let radius = (2.0 * budget).sqrt();
        let dir = self.direction.scaled(radius / self.direction.norm());
        let mut candidates = vec![dir.clone(), dir.scaled(-1.0)];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..n_controls {
            candidates.push(ControlH::random(dir.nt(), dir.nk(), dir.n_modes(), dir.dt(), radius, &mut rng));
        }
        let values: Vec<f64> = candidates.iter().map(|h| self.sk.endpoint(h)).collect::<Result<_>>()?;
        let pick = |better: fn(f64, f64) -> bool| {
            let mut k = 0;
            for i in 1..values.len() {
                if better(values[i], values[k]) {
                    k = i;
                }
            }
            k
        };
        let hi = self.ascend(&candidates[pick(|a, b| a > b)], radius, 1.0)?;
        let lo = -self.ascend(&candidates[pick(|a, b| a < b)], radius, -1.0)?;
        Ok((lo.min(self.phi0), hi.max(self.phi0)))
    }

    /// Maximizes `sign * Phi^h` on the ball of radius `radius` by projected gradient steps.
    fn ascend(&self, start: &ControlH, radius: f64, sign: f64) -> Result<f64> {
        let project = |h: ControlH| {
            let n = h.norm();
            if n > radius {
                h.scaled(radius / n)
            } else {
                h
            }
        };
        let mut h = start.clone();
        let (v, mut g) = self.sk.value_and_gradient(&h)?;
        let mut best = sign * v;
        let mut step = 0.5 * radius;
        for _ in 0..20 {
            let gn = g.norm();
            if gn == 0.0 {
                break;
            }
            let trial = project(h.axpy(sign * step / gn, &g)?);
            let (tv, tg) = self.sk.value_and_gradient(&trial)?;
            if sign * tv > best {
                best = sign * tv;
                h = trial;
                g = tg;
                step *= 1.5;
            } else {
                step *= 0.3;
            }
        }
        Ok(best)
    }
}

pub fn init_shift(
    model: &ModelSpec,
    grid: &GridSpec,
    obs: &Observation,
    z: f64,
    alpha: f64,
) -> Result<(ControlH, ControlH)> {
    RateSolver::new(model, grid, obs, RateOptions::default())?.init_shift(z, alpha)
}

pub fn rate_function(model: &ModelSpec, grid: &GridSpec, obs: &Observation, y: f64) -> Result<RateResult> {
    RateSolver::new(model, grid, obs, RateOptions::default())?.rate(y)
}

pub fn rate_profile(model: &ModelSpec, grid: &GridSpec, obs: &Observation, y_grid: &[f64]) -> Result<Vec<RateResult>> {
    RateSolver::new(model, grid, obs, RateOptions::default())?.profile(y_grid)
}

pub fn support_probe(
    model: &ModelSpec,
    grid: &GridSpec,
    obs: &Observation,
    n_controls: usize,
    budget: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    RateSolver::new(model, grid, obs, RateOptions::default())?.support_probe(n_controls, budget, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covkernel::CovarianceSpec;
    use crate::solver::InitialCondition;

    fn linear() -> (ModelSpec, GridSpec, Observation) {
        let grid = GridSpec::new(1.25, 128, 16, 1.0, 64, 0).unwrap();
        let obs = Observation::new(&grid, 1.0, &[0.0]).unwrap();
        (ModelSpec::linear(CovarianceSpec::wave_white(), 1.0), grid, obs)
    }

    fn nonlinear() -> (ModelSpec, GridSpec, Observation) {
        let grid = GridSpec::new(1.5, 32, 12, 1.0, 8, 0).unwrap();
        let obs = Observation::new(&grid, 1.0, &[0.0]).unwrap();
        let model = ModelSpec::nonlinear_default(
            CovarianceSpec::wave_white(),
            InitialCondition::Bump { u0: 0.3, u1: 0.0, width: 0.3 },
            1.0,
        );
        (model, grid, obs)
    }

    #[test]
    fn linear_bracket_closed_form() {
        let (m, g, o) = linear();
        let rs = RateSolver::new(&m, &g, &o, RateOptions::default()).unwrap();
        let (p, n) = rs.init_shift(1.0, 0.1).unwrap();
        assert!((rs.skeleton().endpoint(&p).unwrap() - 1.1).abs() < 1e-12);
        assert!((rs.skeleton().endpoint(&n).unwrap() + 1.1).abs() < 1e-12);
        assert!(rs.init_shift(rs.phi0(), 1e-3).is_ok());
        assert!(rs.init_shift(1.0, 0.0).is_err());
    }

    #[test]
    fn linear_rate_is_quadratic() {
        let (m, g, o) = linear();
        let rs = RateSolver::new(&m, &g, &o, RateOptions::default()).unwrap();
        let g1 = rs.skeleton().propagator().discrete_g1(o.time_index, o.time_index);
        for y in [1.0, -1.0, 0.3] {
            let r = rs.rate(y).unwrap();
            assert!(r.converged, "{r:?}");
            let want = y * y / (2.0 * g1);
            assert!((r.rate / want - 1.0).abs() < 1e-6, "{} vs {want}", r.rate);
            assert!(r.residual < rs.tol_c());
            assert!(r.stationarity < 1e-4);
            assert!(!r.flagged);
        }
        let z = rs.rate(0.0).unwrap();
        assert_eq!(z.rate, 0.0);
        assert_eq!(z.h_star.norm(), 0.0);
    }

    #[test]
    fn nonlinear_bracket_and_rate() {
        let (m, g, o) = nonlinear();
        let rs = RateSolver::new(&m, &g, &o, RateOptions::default()).unwrap();
        let (p, n) = rs.init_shift(2.0, 0.5).unwrap();
        assert!(rs.skeleton().endpoint(&n).unwrap() < 2.0 && rs.skeleton().endpoint(&p).unwrap() > 2.0);
        let r = rs.rate(rs.phi0() + 0.4).unwrap();
        assert!(r.converged);
        assert!(r.rate > 0.0 && r.gamma_bar > 0.0);
        // h* satisfies the constraint
        let v = rs.skeleton().endpoint(&r.h_star).unwrap();
        assert!((v - r.y).abs() < rs.tol_c());
    }

    #[test]
    fn profile_shape() {
        let (m, g, o) = nonlinear();
        let rs = RateSolver::new(&m, &g, &o, RateOptions { starts: 1, ..Default::default() }).unwrap();
        let c = rs.phi0();
        let grid: Vec<f64> = (-4..=4).map(|k| c + 0.05 + 0.2 * k as f64).collect();
        let prof = rs.profile(&grid).unwrap();
        let argmin = (0..prof.len()).min_by(|&a, &b| prof[a].rate.total_cmp(&prof[b].rate)).unwrap();
        assert!((grid[argmin] - c).abs() <= 0.2);
        for i in 0..prof.len() {
            assert!(prof[i].converged);
            if i < argmin {
                assert!(prof[i].rate >= prof[i + 1].rate);
            } else if i > argmin {
                assert!(prof[i].rate >= prof[i - 1].rate);
            }
        }
        let mut buf = Vec::new();
        write_profile_csv(&prof, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("y,I,residual,iterations,gamma_bar"));
        assert_eq!(text.lines().count(), 10);
    }

    #[test]
    fn support_probe_scaling() {
        let (m, g, o) = linear();
        let rs = RateSolver::new(&m, &g, &o, RateOptions::default()).unwrap();
        let g1 = rs.skeleton().propagator().discrete_g1(o.time_index, o.time_index);
        assert_eq!(rs.support_probe(4, 0.0, 1).unwrap(), (0.0, 0.0));
        for b in [1.0, 10.0] {
            let (lo, hi) = rs.support_probe(4, b, 1).unwrap();
            let want = (2.0 * b * g1).sqrt();
            assert!((hi / want - 1.0).abs() < 1e-9 && (lo / want + 1.0).abs() < 1e-9);
        }
        let (m, g, o) = nonlinear();
        let rs = RateSolver::new(&m, &g, &o, RateOptions::default()).unwrap();
        let widths: Vec<f64> = [1.0, 10.0, 100.0]
            .iter()
            .map(|&b| {
                let (lo, hi) = rs.support_probe(8, b, 2).unwrap();
                hi - lo
            })
            .collect();
        assert!(widths[0] < widths[1] && widths[1] < widths[2], "{widths:?}");
    }
}
