//! Self-checks run by `varadhan-lab validate`.
//!
//! Each check compares a computed quantity against a reference that does not come from
//! the code path under test: power laws of the kernel against quadrature fits, the linear
//! equation against its explicit Gaussian law, reverse-mode gradients against finite
//! differences and the forward linearized solve.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::covkernel::{exponents, fit_exponent, g1_quadrature, Correlation, CovarianceSpec, Operator};
use crate::error::Result;
use crate::mc::{endpoint_samples, moments, varadhan_sweep};
use crate::noise::{ht_inner, ControlH, GridSpec};
use crate::rate::{RateOptions, RateSolver};
use crate::skeleton::{forward_xi, Skeleton};
use crate::solver::{InitialCondition, ModelSpec, Observation, Propagator};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub reference: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn abs(name: &str, value: f64, reference: f64, tolerance: f64, detail: String) -> Self {
        let passed = (value - reference).abs() <= tolerance;
        Self { name: name.into(), value, reference, tolerance, passed, detail }
    }

    fn below(name: &str, value: f64, tolerance: f64, detail: String) -> Self {
        Self { name: name.into(), value, reference: 0.0, tolerance, passed: value < tolerance, detail }
    }

    pub fn line(&self) -> String {
        format!(
            "{:<6} {:<44} value={:<14.6e} ref={:<14.6e} tol={:<10.3e} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.reference,
            self.tolerance,
            self.detail
        )
    }
}

/// Exponent of `g1` fitted to quadrature values over `t in [0.05, 0.5]`.
pub fn kernel_power_laws() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for op in [Operator::Wave, Operator::Heat] {
        for beta in [0.5, 1.0, 1.5] {
            let cov = CovarianceSpec::new(Correlation::Riesz { beta }, 2, op)?;
            let samples: Vec<(f64, f64)> = (0..8)
                .map(|k| {
                    let t = 0.05 * 10f64.powf(k as f64 / 7.0);
                    g1_quadrature(&cov, t).map(|g| (t, g))
                })
                .collect::<Result<_>>()?;
            let fitted = fit_exponent(&samples)?;
            let name = format!("g1 exponent {:?} beta={beta}", op).to_lowercase();
            out.push(Check::abs(&name, fitted, exponents(&cov).eta, 0.01, String::new()));
        }
    }
    Ok(out)
}

/// Grid on which the white-noise wave equation in `d = 1` reproduces `g1(1) = 1/4` to
/// within `5e-4`.
pub fn linear_oracle_grid() -> Result<(ModelSpec, GridSpec, Observation)> {
    let grid = GridSpec::new(1.25, 1024, 32, 1.0, 512, 0)?;
    let obs = Observation::new(&grid, 1.0, &[0.0])?;
    Ok((ModelSpec::linear(CovarianceSpec::wave_white(), 1.0), grid, obs))
}

/// Variance, rate function and Varadhan limit of the linear equation against its Gaussian
/// law with variance `eps^2 t^2 / 4`.
pub fn gaussian_oracle(replicas: usize) -> Result<Vec<Check>> {
    let (model, grid, obs) = linear_oracle_grid()?;
    let g1 = 0.25;
    let eps = 0.5;
    let prop = Propagator::new(&model.with_eps(eps), &grid)?;
    let u: Vec<f64> = endpoint_samples(&prop, &obs, eps, replicas, None, 0)?.iter().map(|s| s.u).collect();
    let m = moments(&u);
    let mut out = vec![Check::abs(
        "linear variance eps=0.5",
        m.var,
        eps * eps * g1,
        3.0 * m.var_se,
        format!("N={replicas}, se={:.2e}", m.var_se),
    )];
    let rs = RateSolver::from_propagator(Propagator::new(&model, &grid)?, &obs, RateOptions::default())?;
    let r = rs.rate(1.0)?;
    out.push(Check::abs(
        "linear rate I(1)",
        r.rate,
        2.0,
        2e-3,
        format!("converged={}, residual={:.1e}", r.converged, r.residual),
    ));
    let table = varadhan_sweep(&model, &grid, &obs, &[1.0, 0.7, 0.5, 0.35], 1.0, r.rate, replicas, Some(&r.h_star))?;
    let ext = table.extrapolated.unwrap_or(f64::NAN);
    out.push(Check::abs("linear Varadhan limit", ext, -2.0, 0.04, format!("raw={:.4}", table.raw.unwrap_or(f64::NAN))));
    Ok(out)
}

/// Nonlinear model used by the gradient and support checks.
pub fn nonlinear_default_1d() -> Result<(ModelSpec, GridSpec, Observation)> {
    let grid = GridSpec::new(1.5, 64, 16, 1.0, 16, 0)?;
    let obs = Observation::new(&grid, 1.0, &[0.0])?;
    let model = ModelSpec::nonlinear_default(
        CovarianceSpec::wave_white(),
        InitialCondition::Bump { u0: 0.3, u1: 0.0, width: 0.3 },
        1.0,
    );
    Ok((model, grid, obs))
}

/// Reverse-mode gradient against central differences, and against the forward solve of
/// the linearized equation on a `16 x 16` spatial grid with 8 time steps.
pub fn gradient_exactness() -> Result<Vec<Check>> {
    let (model, grid, obs) = nonlinear_default_1d()?;
    let sk = Skeleton::new(&model, &grid, &obs)?;
    let nm = sk.propagator().modes().len();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let h = ControlH::random(grid.nt, grid.nk, nm, grid.dt(), 2.0, &mut rng);
        let g = ControlH::random(grid.nt, grid.nk, nm, grid.dt(), 1.0, &mut rng);
        let grad = sk.value_and_gradient(&h)?.1;
        let d = 1e-5;
        let fd = (sk.endpoint(&h.axpy(d, &g)?)? - sk.endpoint(&h.axpy(-d, &g)?)?) / (2.0 * d);
        let an = ht_inner(&grad, &g)?;
        worst = worst.max((fd - an).abs() / an.abs().max(1e-12));
    }
    let mut out = vec![Check::below("gradient vs central differences", worst, 1e-4, "10 pairs".into())];

    let cov = CovarianceSpec::new(Correlation::Riesz { beta: 1.0 }, 2, Operator::Wave)?;
    let grid = GridSpec::new(1.0, 16, 8, 0.5, 4, 0)?;
    let obs = Observation::new(&grid, 0.5, &[0.0, 0.0])?;
    let model = ModelSpec::nonlinear_default(cov, InitialCondition::Bump { u0: 0.3, u1: 0.0, width: 0.3 }, 1.0);
    let sk = Skeleton::new(&model, &grid, &obs)?;
    let h = ControlH::random(grid.nt, grid.nk, sk.propagator().modes().len(), grid.dt(), 2.0, &mut rng);
    let adj = sk.value_and_gradient(&h)?.1;
    let fwd = forward_xi(&model, &grid, &obs, &h)?;
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let g = ControlH::random(grid.nt, grid.nk, adj.n_modes(), grid.dt(), 1.0, &mut rng);
        worst = worst.max((ht_inner(&adj, &g)? - ht_inner(&fwd, &g)?).abs());
    }
    out.push(Check::below("adjoint vs forward linearized solve", worst, 1e-8, "16x16x8".into()));
    Ok(out)
}

/// Pathwise gap between the solution on a shifted path and the shifted equation.
pub fn shift_identity(replicas: usize) -> Result<Vec<Check>> {
    let (model, grid, _) = nonlinear_default_1d()?;
    let model = model.with_eps(0.5);
    let prop = Propagator::new(&model, &grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut worst: f64 = 0.0;
    for r in 0..replicas as u64 {
        let h = ControlH::random(grid.nt, grid.nk, prop.modes().len(), grid.dt(), 2.0, &mut rng);
        let path = prop.sample_path(r);
        let a =
            prop.forward(&prop.drive_coeffs(Some(&path.shifted(&h, 1.0 / model.eps)?), model.eps, None)?, grid.nt)?;
        let b = prop.forward(&prop.drive_coeffs(Some(&path), model.eps, Some(&h))?, grid.nt)?;
        for (x, y) in a.u.iter().zip(&b.u) {
            for (p, q) in x.iter().zip(y) {
                worst = worst.max((p - q).abs());
            }
        }
    }
    Ok(vec![Check::below("Cameron-Martin shift identity", worst, 1e-8, format!("{replicas} replicas"))])
}

/// Varadhan limit of the nonlinear model at 1.5 standard deviations against the
/// optimized rate function, with tilted estimates at `replicas` per level.
pub fn nonlinear_varadhan(replicas: usize) -> Result<Vec<Check>> {
    let (model, grid, obs) = nonlinear_default_1d()?;
    let prop = Propagator::new(&model, &grid)?;
    let pilot: Vec<f64> = endpoint_samples(&prop, &obs, 1.0, 10_000, None, 1 << 40)?.iter().map(|s| s.u).collect();
    let sd = moments(&pilot).var.sqrt();
    let rs = RateSolver::from_propagator(prop, &obs, RateOptions::default())?;
    let y = rs.phi0() + 1.5 * sd;
    let r = rs.rate(y)?;
    let table = varadhan_sweep(&model, &grid, &obs, &[1.0, 0.7, 0.5, 0.35], y, r.rate, replicas, Some(&r.h_star))?;
    let dev = table.relative_deviation.unwrap_or(f64::INFINITY);
    Ok(vec![Check::below(
        "nonlinear Varadhan relative deviation",
        dev,
        0.15,
        format!("y={y:.4}, I={:.4}, extrapolated={:.4}", r.rate, table.extrapolated.unwrap_or(f64::NAN)),
    )])
}

/// Checks run by `validate`; `full` adds the slow nonlinear Varadhan comparison.
pub fn run_all(full: bool) -> Result<Vec<Check>> {
    let mut out = kernel_power_laws()?;
    out.extend(gaussian_oracle(10_000)?);
    out.extend(gradient_exactness()?);
    out.extend(shift_identity(20)?);
    if full {
        out.extend(nonlinear_varadhan(100_000)?);
    }
    Ok(out)
}
