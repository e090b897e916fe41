//! The controlled deterministic equation `Phi^h`, its derivative in `h` and the first
//! chaos `N(h)` of the noisy solution around it.
//!
//! The skeleton is the forward recursion of [`Propagator`] with drive coefficients
//! `dt h`. Its gradient with respect to `h` comes from the reverse sweep of that same
//! recursion, so it is exact for the discrete objective. [`forward_xi`] solves the
//! linearized equation forward in physical space for every coordinate at once and serves
//! as the independent check of the reverse sweep.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::noise::{ControlH, GridSpec, NoisePath};
use crate::solver::{Field, ModelSpec, Observation, Propagator, Trajectory};
use crate::spectral::unflatten;

/// Skeleton at one control.
#[derive(Debug, Clone)]
pub struct SkeletonResult {
    pub phi: Field,
    pub endpoint: f64,
    pub gradient: ControlH,
    pub gamma_bar: f64,
}

#[derive(Serialize)]
struct ScalarBlock {
    t: f64,
    x: Vec<f64>,
    endpoint: f64,
    gamma_bar: f64,
}

impl SkeletonResult {
    /// JSON block with the endpoint value and `gamma_bar`.
    pub fn write_json<W: Write>(&self, obs: &Observation, out: W) -> Result<()> {
        let block = ScalarBlock { t: obs.t, x: obs.x.clone(), endpoint: self.endpoint, gamma_bar: self.gamma_bar };
        serde_json::to_writer_pretty(out, &block)?;
        Ok(())
    }

    pub fn write_gradient<W: Write>(&self, out: W) -> Result<()> {
        self.gradient.write_binary(out)
    }
}

/// Window restriction of `||Xi^h(t,x)||^2` and its split into the direct term
/// `Lambda sigma(Phi)` and the propagated remainder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WindowNorm {
    pub rho: f64,
    /// discrete `g1(rho)`
    pub g1: f64,
    pub norm_sq: f64,
    pub leading_sq: f64,
    /// `||Xi - leading||^2` on the window
    pub remainder_sq: f64,
}

/// One row of the first-order expansion table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExpansionRow {
    pub eps: f64,
    pub residual: f64,
}

/// Skeleton evaluator bound to one (model, grid, observation point).
#[derive(Debug, Clone)]
pub struct Skeleton {
    prop: Propagator,
    obs: Observation,
}

impl Skeleton {
    pub fn new(model: &ModelSpec, grid: &GridSpec, obs: &Observation) -> Result<Self> {
        let prop = Propagator::new(model, grid)?;
        Ok(Self::from_propagator(prop, obs))
    }

    pub fn from_propagator(prop: Propagator, obs: &Observation) -> Self {
        Self { prop, obs: obs.clone() }
    }

    pub fn propagator(&self) -> &Propagator {
        &self.prop
    }

    pub fn observation(&self) -> &Observation {
        &self.obs
    }

    pub fn zero_control(&self) -> ControlH {
        self.prop.zero_control()
    }

    fn trajectory(&self, h: &ControlH, steps: usize) -> Result<Trajectory> {
        let c = self.prop.drive_coeffs(None, 0.0, Some(h))?;
        self.prop.forward(&c, steps)
    }

    /// `Phi^h(t, x)`.
    pub fn endpoint(&self, h: &ControlH) -> Result<f64> {
        let traj = self.trajectory(h, self.obs.time_index)?;
        Ok(traj.u[self.obs.time_index][self.obs.point_index])
    }

    /// `Phi^h(t, x)` and its gradient in `H_T`.
    pub fn value_and_gradient(&self, h: &ControlH) -> Result<(f64, ControlH)> {
        let traj = self.trajectory(h, self.obs.time_index)?;
        let value = traj.u[self.obs.time_index][self.obs.point_index];
        let g = self.prop.adjoint(&traj, self.obs.point_index, false)?;
        Ok((value, self.prop.to_control(g)))
    }

    /// Full skeleton field on `[0, T]` plus endpoint data.
    pub fn solve(&self, h: &ControlH) -> Result<SkeletonResult> {
        let grid = *self.prop.grid();
        let traj = self.trajectory(h, grid.nt)?;
        let endpoint = traj.u[self.obs.time_index][self.obs.point_index];
        let partial = Trajectory {
            u: traj.u[..=self.obs.time_index].to_vec(),
            drive: traj.drive[..self.obs.time_index].to_vec(),
        };
        let gradient = self.prop.to_control(self.prop.adjoint(&partial, self.obs.point_index, false)?);
        let gamma_bar = gradient.norm_sq();
        let phi = field_from(&self.prop, &traj.u);
        Ok(SkeletonResult { phi, endpoint, gradient, gamma_bar })
    }

    /// One draw of `N(h)(t, x)` on `path`.
    pub fn chaos(&self, h: &ControlH, path: &NoisePath) -> Result<f64> {
        let traj = self.trajectory(h, self.obs.time_index)?;
        self.chaos_along(&traj, path)
    }

    /// `N(h)` for a precomputed skeleton trajectory, so ensembles reuse it.
    pub fn chaos_along(&self, traj: &Trajectory, path: &NoisePath) -> Result<f64> {
        let dc = self.prop.drive_coeffs(Some(path), 1.0, None)?;
        let du = self.prop.tangent(traj, &dc);
        Ok(du[self.obs.time_index][self.obs.point_index])
    }

    pub fn skeleton_trajectory(&self, h: &ControlH) -> Result<Trajectory> {
        self.trajectory(h, self.obs.time_index)
    }

    /// `|eps^{-1}(u^{eps,h} - Phi^h) - N(h)|` at the observation point for each `eps`,
    /// all on the same path.
    pub fn expansion_check(&self, h: &ControlH, path: &NoisePath, eps_list: &[f64]) -> Result<Vec<ExpansionRow>> {
        if eps_list.windows(2).any(|w| w[1] >= w[0]) || eps_list.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::InvalidInput("noise levels must be positive and strictly decreasing".into()));
        }
        let traj = self.trajectory(h, self.obs.time_index)?;
        let phi = traj.u[self.obs.time_index][self.obs.point_index];
        let chaos = self.chaos_along(&traj, path)?;
        eps_list
            .iter()
            .map(|&eps| {
                let c = self.prop.drive_coeffs(Some(path), eps, Some(h))?;
                let u = self.prop.endpoint(&c, &self.obs)?;
                Ok(ExpansionRow { eps, residual: ((u - phi) / eps - chaos).abs() })
            })
            .collect()
    }

    /// `||Xi^h(t,x)||^2` over the slabs in `[t - rho, t]`.
    pub fn window_norm(&self, h: &ControlH, rho: f64) -> Result<WindowNorm> {
        let dt = self.prop.grid().dt();
        let n = self.obs.time_index;
        let w = rho / dt;
        let width = w.round();
        if (w - width).abs() > 1e-9 || width < 1.0 || width as usize > n {
            return Err(Error::InvalidInput(format!("window {rho} must be a positive multiple of dt not exceeding t")));
        }
        let width = width as usize;
        let traj = self.trajectory(h, n)?;
        let full = self.prop.adjoint(&traj, self.obs.point_index, false)?;
        let lead = self.prop.adjoint(&traj, self.obs.point_index, true)?;
        let nm = self.prop.modes().len();
        let range = (n - width) * nm..n * nm;
        let sq = |v: &[f64]| dt * v.iter().map(|a| a * a).sum::<f64>();
        let rem: Vec<f64> = full[range.clone()].iter().zip(&lead[range.clone()]).map(|(a, b)| a - b).collect();
        Ok(WindowNorm {
            rho,
            g1: self.prop.discrete_g1(n, width),
            norm_sq: sq(&full[range.clone()]),
            leading_sq: sq(&lead[range]),
            remainder_sq: sq(&rem),
        })
    }
}

fn field_from(prop: &Propagator, rows: &[Vec<f64>]) -> Field {
    let grid = prop.grid();
    let dim = prop.model().cov.dim();
    let mut values = Vec::with_capacity(rows.len() * prop.points());
    for r in rows {
        values.extend_from_slice(r);
    }
    Field::from_values(grid, dim, values)
}

/// Solves the skeleton equation on `[0, T]`.
pub fn solve_phi(model: &ModelSpec, grid: &GridSpec, h: &ControlH) -> Result<Field> {
    let prop = Propagator::new(model, grid)?;
    let c = prop.drive_coeffs(None, 0.0, Some(h))?;
    let traj = prop.forward(&c, grid.nt)?;
    Ok(field_from(&prop, &traj.u))
}

/// Gradient of `Phi^h(t, x)` with respect to `h`.
pub fn gradient_phi(model: &ModelSpec, grid: &GridSpec, obs: &Observation, h: &ControlH) -> Result<ControlH> {
    Ok(Skeleton::new(model, grid, obs)?.value_and_gradient(h)?.1)
}

/// One draw of the first chaos `N(h)(t, x)`.
pub fn chaos_simulate(
    model: &ModelSpec,
    grid: &GridSpec,
    obs: &Observation,
    h: &ControlH,
    path: &NoisePath,
) -> Result<f64> {
    Skeleton::new(model, grid, obs)?.chaos(h, path)
}

pub fn expansion_check(
    model: &ModelSpec,
    grid: &GridSpec,
    obs: &Observation,
    h: &ControlH,
    path: &NoisePath,
    eps_list: &[f64],
) -> Result<Vec<ExpansionRow>> {
    Skeleton::new(model, grid, obs)?.expansion_check(h, path, eps_list)
}

pub fn dphi_window_norm(
    model: &ModelSpec,
    grid: &GridSpec,
    obs: &Observation,
    h: &ControlH,
    rho: f64,
) -> Result<WindowNorm> {
    Skeleton::new(model, grid, obs)?.window_norm(h, rho)
}

/// `Xi^h(t_n, x_p)` by solving the linearized equation forward in physical space with the
/// whole `H_T`-valued unknown carried along. Convolution kernels are formed by a direct
/// inverse DFT of the multipliers. Meant for small grids only.
pub fn forward_xi(model: &ModelSpec, grid: &GridSpec, obs: &Observation, h: &ControlH) -> Result<ControlH> {
    let prop = Propagator::new(model, grid)?;
    let dim = model.cov.dim();
    let npts = prop.points();
    let nm = prop.modes().len();
    let cols = grid.nt * nm;
    let n = obs.time_index;
    let needed = (n + 1) * npts * cols * 8 + n * npts * npts * 8;
    if needed > crate::solver::MEMORY_BUDGET / 4 {
        return Err(Error::GridTooLarge { needed, budget: crate::solver::MEMORY_BUDGET / 4 });
    }
    let dt = grid.dt();
    let c = prop.drive_coeffs(None, 0.0, Some(h))?;
    let traj = prop.forward(&c, n)?;

    let idx: Vec<Vec<usize>> = (0..npts).map(|p| unflatten(p, grid.nx, dim)).collect();
    let basis: Vec<Vec<f64>> =
        (0..npts).map(|p| (0..nm).map(|k| prop.modes().basis_value(k, &idx[p])).collect()).collect();
    let freqs = crate::spectral::bin_frequencies(grid.nx, dim, grid.half_width);
    let op = model.cov.operator();
    // physical kernels K_l(z) = N^{-1} sum_q M_l(q) cos(2 pi q.z / N), multipliers are even
    let kernel = |lag: usize| -> Vec<f64> {
        let s = (lag as f64 - 0.5) * dt;
        let m: Vec<f64> = freqs.iter().map(|&r| crate::covkernel::fourier_lambda_radial(op, s, r)).collect();
        (0..npts)
            .map(|z| {
                let mut acc = 0.0;
                for (q, mq) in m.iter().enumerate() {
                    let phase: f64 = idx[q].iter().zip(&idx[z]).map(|(&a, &b)| (a * b) as f64).sum::<f64>();
                    acc += mq * (2.0 * std::f64::consts::PI * phase / grid.nx as f64).cos();
                }
                acc / npts as f64
            })
            .collect()
    };
    let kernels: Vec<Vec<f64>> = (1..=n).map(kernel).collect();
    let offset = |x: usize, y: usize| -> usize {
        let d: Vec<usize> = idx[x].iter().zip(&idx[y]).map(|(&a, &b)| (a + grid.nx - b) % grid.nx).collect();
        crate::spectral::flatten(&d, grid.nx)
    };

    let sigma = model.sigma;
    let drift = model.drift;
    // xi[j][y] is the H_T-valued derivative of Phi(t_j, y)
    let mut xi: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.0; cols]; npts]];
    // source[i][y] = sigma(Phi_i) e_i phi(y) + (sigma'(Phi_i) D_i + dt b'(Phi_i)) xi_i(y)
    let mut sources: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n);
    for j in 0..n {
        let src: Vec<Vec<f64>> = (0..npts)
            .map(|y| {
                let phi = traj.u[j][y];
                let factor = sigma.derivative(phi) * traj.drive[j][y] + dt * drift.derivative(phi);
                let mut v: Vec<f64> = xi[j][y].iter().map(|a| factor * a).collect();
                for k in 0..nm {
                    v[j * nm + k] += sigma.value(phi) * basis[y][k];
                }
                v
            })
            .collect();
        sources.push(src);
        let next: Vec<Vec<f64>> = (0..npts)
            .map(|x| {
                let mut acc = vec![0.0; cols];
                for (i, src) in sources.iter().enumerate() {
                    let ker = &kernels[j - i];
                    for (y, s) in src.iter().enumerate() {
                        let kv = ker[offset(x, y)];
                        if kv == 0.0 {
                            continue;
                        }
                        for (a, b) in acc.iter_mut().zip(s) {
                            *a += kv * b;
                        }
                    }
                }
                acc
            })
            .collect();
        xi.push(next);
    }
    ControlH::from_coeffs(grid.nt, grid.nk, dt, xi[n][obs.point_index].clone())
}
