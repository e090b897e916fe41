//! Mild-form time stepping on the periodic grid.
//!
//! Every equation in the crate (the noisy equation, its Cameron-Martin shift, the
//! skeleton, their linearizations) is an instance of one discrete recursion
//!
//! ```text
//! u_{j+1} = w_{j+1} + sum_{i<=j} K_{j+1-i} [ sigma(u_i) D_i + dt b(u_i) ]
//! ```
//!
//! where `K_l` is convolution with `Lambda((l - 1/2) dt)` applied as a Fourier multiplier
//! and `D_i = sum_k c(i,k) phi_k` is the driving field of slab `i`. The noisy equation uses
//! `c = eps W`, a shift by `h` adds `dt h`, and the skeleton uses `c = dt h` alone.
//! [`Propagator`] owns the precomputed multipliers and runs the forward map, its tangent
//! and its adjoint.

use std::io::Write;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::covkernel::{fourier_lambda_dt_wave, fourier_lambda_radial, CovarianceSpec, Operator};
use crate::error::{Error, Result};
use crate::noise::{ControlH, GridSpec, ModeKind, ModeSet, NoisePath};
use crate::spectral::{bin_frequencies, unflatten, FftNd};

/// Workspace budget for history-carrying computations.
pub const MEMORY_BUDGET: usize = 1 << 30;

/// Scalar coefficient functions selectable by name.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Coefficient {
    /// `c`
    Const { c: f64 },
    /// `a + b clamp(u, lo, hi)`
    AffineClamped { a: f64, b: f64, lo: f64, hi: f64 },
    /// `a + b cos(u)`
    Cosine { a: f64, b: f64 },
    /// `a tanh(u)`
    Tanh { a: f64 },
}

impl Coefficient {
    pub fn value(&self, u: f64) -> f64 {
        match *self {
            Coefficient::Const { c } => c,
            Coefficient::AffineClamped { a, b, lo, hi } => a + b * u.clamp(lo, hi),
            Coefficient::Cosine { a, b } => a + b * u.cos(),
            Coefficient::Tanh { a } => a * u.tanh(),
        }
    }

    pub fn derivative(&self, u: f64) -> f64 {
        match *self {
            Coefficient::Const { .. } => 0.0,
            Coefficient::AffineClamped { b, lo, hi, .. } => {
                if u > lo && u < hi {
                    b
                } else {
                    0.0
                }
            }
            Coefficient::Cosine { b, .. } => -b * u.sin(),
            Coefficient::Tanh { a } => {
                let c = u.cosh();
                a / (c * c)
            }
        }
    }

    /// `sup |f|`.
    pub fn sup_abs(&self) -> f64 {
        match *self {
            Coefficient::Const { c } => c.abs(),
            Coefficient::AffineClamped { a, b, lo, hi } => (a + b * lo).abs().max((a + b * hi).abs()),
            Coefficient::Cosine { a, b } => a.abs() + b.abs(),
            Coefficient::Tanh { a } => a.abs(),
        }
    }

    /// `inf |f|` (zero when the function changes sign).
    pub fn inf_abs(&self) -> f64 {
        match *self {
            Coefficient::Const { c } => c.abs(),
            Coefficient::AffineClamped { a, b, lo, hi } => {
                let (x, y) = (a + b * lo, a + b * hi);
                if x * y <= 0.0 {
                    0.0
                } else {
                    x.abs().min(y.abs())
                }
            }
            Coefficient::Cosine { a, b } => (a.abs() - b.abs()).max(0.0),
            Coefficient::Tanh { .. } => 0.0,
        }
    }

    pub fn is_constant(&self) -> bool {
        match *self {
            Coefficient::Const { .. } => true,
            Coefficient::AffineClamped { b, .. } | Coefficient::Cosine { b, .. } => b == 0.0,
            Coefficient::Tanh { a } => a == 0.0,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.is_constant() && self.value(0.0) == 0.0
    }

    /// Default nonlinear diffusion `1 + 0.25 cos u`.
    pub fn default_sigma() -> Self {
        Coefficient::Cosine { a: 1.0, b: 0.25 }
    }

    /// Default nonlinear drift `0.5 tanh u`.
    pub fn default_drift() -> Self {
        Coefficient::Tanh { a: 0.5 }
    }
}

/// Deterministic contribution of the initial data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InitialCondition {
    Zero,
    /// Gaussian bumps `amp exp(-|x|^2 / (2 width^2))` as initial value `u0` and (wave only)
    /// initial velocity `u1`. For heat only `u0` is used.
    Bump {
        u0: f64,
        u1: f64,
        width: f64,
    },
}

/// Coefficients of the equation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub cov: CovarianceSpec,
    pub sigma: Coefficient,
    pub drift: Coefficient,
    pub init: InitialCondition,
    pub eps: f64,
    /// Declared lower bound of `|sigma|`.
    pub sigma0: f64,
}

impl ModelSpec {
    /// `sigma = 1`, `b = 0`, `w = 0`.
    pub fn linear(cov: CovarianceSpec, eps: f64) -> Self {
        Self {
            cov,
            sigma: Coefficient::Const { c: 1.0 },
            drift: Coefficient::Const { c: 0.0 },
            init: InitialCondition::Zero,
            eps,
            sigma0: 1.0,
        }
    }

    /// `sigma = 1 + 0.25 cos u`, `b = 0.5 tanh u`, `sigma0 = 0.75`.
    pub fn nonlinear_default(cov: CovarianceSpec, init: InitialCondition, eps: f64) -> Self {
        Self { cov, sigma: Coefficient::default_sigma(), drift: Coefficient::default_drift(), init, eps, sigma0: 0.75 }
    }

    pub fn with_eps(&self, eps: f64) -> Self {
        Self { eps, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps <= 1.0) {
            return Err(Error::Model(format!("noise level must lie in (0, 1], got {}", self.eps)));
        }
        if !(self.sigma0 > 0.0) {
            return Err(Error::Model(format!("sigma0 must be positive, got {}", self.sigma0)));
        }
        // sampled lower bound on a wide range
        for k in 0..=4000 {
            let u = -100.0 + 0.05 * k as f64;
            if self.sigma.value(u).abs() < self.sigma0 * (1.0 - 1e-12) {
                return Err(Error::Model(format!(
                    "|sigma({u})| = {} is below the declared sigma0 = {}",
                    self.sigma.value(u).abs(),
                    self.sigma0
                )));
            }
        }
        if let InitialCondition::Bump { u0, u1, width } = self.init {
            if !(u0.is_finite() && u1.is_finite() && width > 0.0) {
                return Err(Error::Model("bump initial data needs finite amplitudes and positive width".into()));
            }
        }
        Ok(())
    }

    /// Linear additive case: constant `sigma`, zero drift.
    pub fn is_linear(&self) -> bool {
        self.sigma.is_constant() && self.drift.is_zero()
    }
}

/// Grid point `(t_n, x_p)` at which densities and derivatives are evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub t: f64,
    pub x: Vec<f64>,
    pub time_index: usize,
    pub point_index: usize,
}

impl Observation {
    /// Snaps nothing: `t` must be a multiple of `dt` and `x` a grid point.
    pub fn new(grid: &GridSpec, t: f64, x: &[f64]) -> Result<Self> {
        let steps = t / grid.dt();
        let n = steps.round();
        if (steps - n).abs() > 1e-9 || n < 1.0 || n as usize > grid.nt {
            return Err(Error::Grid(format!("observation time {t} is not a grid time in (0, T]")));
        }
        let mut idx = Vec::with_capacity(x.len());
        for &xi in x {
            let pos = (xi + grid.half_width) / grid.dx();
            let j = pos.round();
            if (pos - j).abs() > 1e-9 || j < 0.0 || j as usize >= grid.nx {
                return Err(Error::Grid(format!("observation coordinate {xi} is not a grid point")));
            }
            idx.push(j as usize);
        }
        let point_index = idx.iter().fold(0, |acc, &i| acc * grid.nx + i);
        Ok(Self { t, x: x.to_vec(), time_index: n as usize, point_index })
    }
}

/// Space-time field on the grid, rows `t_0..t_nt`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub nt: usize,
    pub nx: usize,
    pub dim: usize,
    pub horizon: f64,
    pub half_width: f64,
    values: Vec<f64>,
}

impl Field {
    pub(crate) fn from_values(grid: &GridSpec, dim: usize, values: Vec<f64>) -> Self {
        let nt = values.len() / grid.points(dim) - 1;
        Self { nt, nx: grid.nx, dim, horizon: grid.horizon, half_width: grid.half_width, values }
    }

    fn from_rows(grid: &GridSpec, dim: usize, rows: &[Vec<f64>]) -> Self {
        let mut values = Vec::with_capacity(rows.len() * grid.points(dim));
        for r in rows {
            values.extend_from_slice(r);
        }
        Self { nt: rows.len() - 1, nx: grid.nx, dim, horizon: grid.horizon, half_width: grid.half_width, values }
    }

    pub fn points(&self) -> usize {
        self.nx.pow(self.dim as u32)
    }

    pub fn row(&self, j: usize) -> &[f64] {
        let n = self.points();
        &self.values[j * n..(j + 1) * n]
    }

    pub fn at(&self, j: usize, point: usize) -> f64 {
        self.values[j * self.points() + point]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn max_abs_diff(&self, other: &Field) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Header `nt, nx, d` (u64) and `T, L` (f64), then row-major f64 payload.
    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        for v in [self.nt as u64, self.nx as u64, self.dim as u64] {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(&self.horizon.to_le_bytes())?;
        out.write_all(&self.half_width.to_le_bytes())?;
        for v in &self.values {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    /// One time slice as CSV with columns for the grid coordinates and `u`.
    pub fn write_slice_csv<W: Write>(&self, j: usize, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (0..self.dim).map(|a| format!("x{a}")).collect();
        header.push("u".into());
        w.write_record(&header)?;
        let dx = 2.0 * self.half_width / self.nx as f64;
        for p in 0..self.points() {
            let mut rec: Vec<String> = unflatten(p, self.nx, self.dim)
                .iter()
                .map(|&i| (-self.half_width + i as f64 * dx).to_string())
                .collect();
            rec.push(self.at(j, p).to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Forward trajectory: fields `u_0..u_n` and the driving fields `D_0..D_{n-1}`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub u: Vec<Vec<f64>>,
    pub drive: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.u.len() - 1
    }
}

/// Precomputed multipliers, initial contribution and FFT plans for one (model, grid).
#[derive(Debug, Clone)]
pub struct Propagator {
    model: ModelSpec,
    grid: GridSpec,
    modes: ModeSet,
    fft: FftNd,
    points: usize,
    /// `mult[l-1][q] = F Lambda((l - 1/2) dt)(xi_q)`, `l = 1..=nt`
    mult: Vec<Vec<f64>>,
    w: Vec<Vec<f64>>,
}

impl Propagator {
    pub fn new(model: &ModelSpec, grid: &GridSpec) -> Result<Self> {
        model.validate()?;
        grid.validate()?;
        let dim = model.cov.dim();
        let modes = ModeSet::new(grid, &model.cov)?;
        let fft = FftNd::new(grid.nx, dim);
        let points = grid.points(dim);
        let freqs = bin_frequencies(grid.nx, dim, grid.half_width);
        let dt = grid.dt();
        let op = model.cov.operator();
        let mult = (1..=grid.nt)
            .map(|l| {
                let s = (l as f64 - 0.5) * dt;
                freqs.iter().map(|&r| fourier_lambda_radial(op, s, r)).collect()
            })
            .collect();
        let w = initial_contribution(model, grid, &fft, &freqs)?;
        Ok(Self { model: model.clone(), grid: *grid, modes, fft, points, mult, w })
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn modes(&self) -> &ModeSet {
        &self.modes
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn w(&self, j: usize) -> &[f64] {
        &self.w[j]
    }

    pub fn zero_control(&self) -> ControlH {
        ControlH::zeros_on(&self.grid, &self.modes)
    }

    pub fn zero_path(&self) -> NoisePath {
        NoisePath::zeros(&self.grid, self.modes.len())
    }

    pub fn sample_path(&self, stream: u64) -> NoisePath {
        NoisePath::sample(&self.grid, &self.modes, stream)
    }

    pub fn check_path(&self, path: &NoisePath) -> Result<()> {
        if path.nt() != self.grid.nt || path.n_modes() != self.modes.len() {
            return Err(Error::Shape(format!(
                "path is {}x{}, grid needs {}x{}",
                path.nt(),
                path.n_modes(),
                self.grid.nt,
                self.modes.len()
            )));
        }
        Ok(())
    }

    pub fn check_control(&self, h: &ControlH) -> Result<()> {
        if h.nt() != self.grid.nt || h.n_modes() != self.modes.len() {
            return Err(Error::Shape(format!(
                "control is {}x{}, grid needs {}x{}",
                h.nt(),
                h.n_modes(),
                self.grid.nt,
                self.modes.len()
            )));
        }
        Ok(())
    }

    /// Drive coefficients `eps W(i,k) + dt h(i,k)`.
    pub fn drive_coeffs(&self, path: Option<&NoisePath>, eps: f64, h: Option<&ControlH>) -> Result<Vec<f64>> {
        let n = self.grid.nt * self.modes.len();
        let mut c = vec![0.0; n];
        if let Some(p) = path {
            self.check_path(p)?;
            for (ci, w) in c.iter_mut().zip(p.increments()) {
                *ci += eps * w;
            }
        }
        if let Some(h) = h {
            self.check_control(h)?;
            let dt = self.grid.dt();
            for (ci, v) in c.iter_mut().zip(h.coeffs()) {
                *ci += dt * v;
            }
        }
        Ok(c)
    }

    /// Spatial field `sum_k c_k phi_k` of one slab.
    pub fn synthesize(&self, row: &[f64], buf: &mut [Complex64], scratch: &mut Vec<Complex64>) -> Vec<f64> {
        buf.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
        for (mode, &c) in self.modes.modes().iter().zip(row) {
            if c == 0.0 {
                continue;
            }
            match mode.kind {
                ModeKind::Zero => buf[mode.bin] += mode.weight * c,
                ModeKind::Cos => {
                    buf[mode.bin] += 0.5 * mode.weight * c;
                    buf[mode.conj_bin] += 0.5 * mode.weight * c;
                }
                ModeKind::Sin => {
                    buf[mode.bin] += Complex64::new(0.0, -0.5 * mode.weight * c);
                    buf[mode.conj_bin] += Complex64::new(0.0, 0.5 * mode.weight * c);
                }
            }
        }
        self.fft.inverse(buf, scratch);
        buf.iter().map(|v| v.re).collect()
    }

    /// `sum_x g(x) phi_k(x)` for every coordinate `k`.
    fn project(&self, g: &[f64], buf: &mut [Complex64], scratch: &mut Vec<Complex64>, out: &mut [f64]) {
        for (b, &v) in buf.iter_mut().zip(g) {
            *b = Complex64::new(v, 0.0);
        }
        self.fft.forward(buf, scratch);
        for (o, mode) in out.iter_mut().zip(self.modes.modes()) {
            let z = buf[mode.bin];
            *o = match mode.kind {
                ModeKind::Zero | ModeKind::Cos => mode.weight * z.re,
                ModeKind::Sin => -mode.weight * z.im,
            };
        }
    }

    fn transform(&self, f: &[f64], buf: &mut Vec<Complex64>, scratch: &mut Vec<Complex64>) -> Vec<Complex64> {
        let inv_n = 1.0 / self.points as f64;
        for (b, &v) in buf.iter_mut().zip(f) {
            *b = Complex64::new(v * inv_n, 0.0);
        }
        self.fft.forward(buf, scratch);
        buf.clone()
    }

    /// `sum_{i < j} mult[j - i - 1] * hats[i]`, i.e. the spectrum of `u_j - w_j`.
    fn history_sum(&self, hats: &[Vec<Complex64>], j: usize, acc: &mut [Complex64]) {
        acc.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
        for (i, hat) in hats.iter().enumerate().take(j) {
            let m = &self.mult[j - i - 1];
            for ((a, s), &mq) in acc.iter_mut().zip(hat).zip(m) {
                *a += s * mq;
            }
        }
    }

    /// Runs the recursion for `steps` steps with drive coefficients `coeffs` (`[nt x modes]`).
    pub fn forward(&self, coeffs: &[f64], steps: usize) -> Result<Trajectory> {
        let nm = self.modes.len();
        debug_assert_eq!(coeffs.len(), self.grid.nt * nm);
        let dt = self.grid.dt();
        let n = self.points;
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let mut acc = vec![Complex64::new(0.0, 0.0); n];
        let mut scratch = Vec::new();
        let mut u = Vec::with_capacity(steps + 1);
        let mut drive = Vec::with_capacity(steps);
        let mut hats: Vec<Vec<Complex64>> = Vec::with_capacity(steps);
        u.push(self.w[0].clone());
        for j in 0..steps {
            let d = self.synthesize(&coeffs[j * nm..(j + 1) * nm], &mut buf, &mut scratch);
            let uj = &u[j];
            let source: Vec<f64> = uj
                .iter()
                .zip(&d)
                .map(|(&x, &dj)| self.model.sigma.value(x) * dj + dt * self.model.drift.value(x))
                .collect();
            hats.push(self.transform(&source, &mut buf, &mut scratch));
            drive.push(d);
            self.history_sum(&hats, j + 1, &mut acc);
            self.fft.inverse(&mut acc, &mut scratch);
            let next: Vec<f64> = acc.iter().zip(&self.w[j + 1]).map(|(a, w)| a.re + w).collect();
            if next.iter().any(|v| !v.is_finite() || v.abs() > 1e100) {
                return Err(Error::BlowUp { step: j + 1 });
            }
            u.push(next);
        }
        Ok(Trajectory { u, drive })
    }

    /// One application of the discrete mild map to a whole trajectory guess (Picard step).
    pub fn mild_map(&self, guess: &[Vec<f64>], drive: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let dt = self.grid.dt();
        let n = self.points;
        let steps = guess.len() - 1;
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let mut acc = vec![Complex64::new(0.0, 0.0); n];
        let mut scratch = Vec::new();
        let hats: Vec<Vec<Complex64>> = (0..steps)
            .map(|i| {
                let source: Vec<f64> = guess[i]
                    .iter()
                    .zip(&drive[i])
                    .map(|(&x, &d)| self.model.sigma.value(x) * d + dt * self.model.drift.value(x))
                    .collect();
                self.transform(&source, &mut buf, &mut scratch)
            })
            .collect();
        let mut out = vec![self.w[0].clone()];
        for j in 1..=steps {
            self.history_sum(&hats, j, &mut acc);
            self.fft.inverse(&mut acc, &mut scratch);
            out.push(acc.iter().zip(&self.w[j]).map(|(a, w)| a.re + w).collect());
        }
        out
    }

    /// Tangent of the recursion along a trajectory: response `delta u_0..delta u_n` to a
    /// perturbation `delta_coeffs` of the drive coefficients.
    pub fn tangent(&self, traj: &Trajectory, delta_coeffs: &[f64]) -> Vec<Vec<f64>> {
        let nm = self.modes.len();
        let dt = self.grid.dt();
        let n = self.points;
        let steps = traj.steps();
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let mut acc = vec![Complex64::new(0.0, 0.0); n];
        let mut scratch = Vec::new();
        let mut hats: Vec<Vec<Complex64>> = Vec::with_capacity(steps);
        let mut du = vec![vec![0.0; n]];
        for j in 0..steps {
            let dd = self.synthesize(&delta_coeffs[j * nm..(j + 1) * nm], &mut buf, &mut scratch);
            let src: Vec<f64> = (0..n)
                .map(|x| {
                    let uj = traj.u[j][x];
                    (self.model.sigma.derivative(uj) * traj.drive[j][x] + dt * self.model.drift.derivative(uj))
                        * du[j][x]
                        + self.model.sigma.value(uj) * dd[x]
                })
                .collect();
            hats.push(self.transform(&src, &mut buf, &mut scratch));
            self.history_sum(&hats, j + 1, &mut acc);
            self.fft.inverse(&mut acc, &mut scratch);
            du.push(acc.iter().map(|a| a.re).collect());
        }
        du
    }

    /// Gradient of `u_n(x_p)` with respect to the drive coefficients, by a reverse sweep.
    /// Entries for slabs `i >= n` are zero. With `leading_only`, the propagation terms are
    /// dropped and only the direct term `K_{n-i} sigma(u_i) phi_k` is returned.
    pub fn adjoint(&self, traj: &Trajectory, point: usize, leading_only: bool) -> Result<Vec<f64>> {
        let nm = self.modes.len();
        let dt = self.grid.dt();
        let n = self.points;
        let steps = traj.steps();
        let needed = (steps + 1) * n * std::mem::size_of::<Complex64>();
        if needed > MEMORY_BUDGET {
            return Err(Error::GridTooLarge { needed, budget: MEMORY_BUDGET });
        }
        let mut grad = vec![0.0; self.grid.nt * nm];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let mut acc = vec![Complex64::new(0.0, 0.0); n];
        let mut scratch = Vec::new();
        // lam_hat[l] = FFT(lambda_l) / N for l = 1..=steps, index l - 1
        let mut lam_hat: Vec<Vec<Complex64>> = vec![Vec::new(); steps];
        let mut unit = vec![0.0; n];
        unit[point] = 1.0;
        lam_hat[steps - 1] = self.transform(&unit, &mut buf, &mut scratch);
        let mut row = vec![0.0; nm];
        for j in (0..steps).rev() {
            acc.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
            for l in j + 1..=steps {
                if lam_hat[l - 1].is_empty() {
                    continue;
                }
                let m = &self.mult[l - j - 1];
                for ((a, s), &mq) in acc.iter_mut().zip(&lam_hat[l - 1]).zip(m) {
                    *a += s * mq;
                }
            }
            self.fft.inverse(&mut acc, &mut scratch);
            let mu: Vec<f64> = acc.iter().map(|a| a.re).collect();
            let g: Vec<f64> = mu.iter().zip(&traj.u[j]).map(|(m, &x)| m * self.model.sigma.value(x)).collect();
            self.project(&g, &mut buf, &mut scratch, &mut row);
            grad[j * nm..(j + 1) * nm].copy_from_slice(&row);
            if j >= 1 && !leading_only {
                let lam: Vec<f64> = (0..n)
                    .map(|x| {
                        let uj = traj.u[j][x];
                        mu[x]
                            * (self.model.sigma.derivative(uj) * traj.drive[j][x]
                                + dt * self.model.drift.derivative(uj))
                    })
                    .collect();
                lam_hat[j - 1] = self.transform(&lam, &mut buf, &mut scratch);
            }
        }
        Ok(grad)
    }

    /// Discrete `Lambda(t_n - ., x_p - *)` as an element of `H_T`.
    pub fn lambda_direction(&self, obs: &Observation) -> ControlH {
        let nm = self.modes.len();
        let idx = unflatten(obs.point_index, self.grid.nx, self.model.cov.dim());
        let freqs = bin_frequencies(self.grid.nx, self.model.cov.dim(), self.grid.half_width);
        let mut coeffs = vec![0.0; self.grid.nt * nm];
        for i in 0..obs.time_index {
            let m = &self.mult[obs.time_index - i - 1];
            for k in 0..nm {
                let mode = &self.modes.modes()[k];
                debug_assert!((freqs[mode.bin] - mode.frequency).abs() < 1e-12);
                coeffs[i * nm + k] = m[mode.bin] * self.modes.basis_value(k, &idx);
            }
        }
        ControlH::from_coeffs(self.grid.nt, self.grid.nk, self.grid.dt(), coeffs).expect("finite")
    }

    /// `||Lambda(t_n - ., x - *)||^2` restricted to the last `window` slabs before `t_n`:
    /// the discrete `g1`.
    pub fn discrete_g1(&self, n: usize, window: usize) -> f64 {
        let dt = self.grid.dt();
        let mut total = 0.0;
        for l in 1..=window.min(n) {
            let m = &self.mult[l - 1];
            for mode in self.modes.modes() {
                // a cos/sin pair contributes weight^2 in total
                let share = if mode.kind == ModeKind::Zero { 1.0 } else { 0.5 };
                total += dt * share * (mode.weight * m[mode.bin]).powi(2);
            }
        }
        total
    }

    /// `sum_l dt int Lambda((l - 1/2) dt)`, the discrete `int_0^t Lambda(s)(R^d) ds`.
    pub fn discrete_mass_integral(&self, n: usize) -> f64 {
        (1..=n).map(|l| self.grid.dt() * self.mult[l - 1][0]).sum()
    }

    /// `u(t_n, x_p)` for drive coefficients `coeffs`.
    pub fn endpoint(&self, coeffs: &[f64], obs: &Observation) -> Result<f64> {
        let traj = self.forward(coeffs, obs.time_index)?;
        Ok(traj.u[obs.time_index][obs.point_index])
    }

    /// Gradient coefficients as an `H_T` element on this grid.
    pub fn to_control(&self, coeffs: Vec<f64>) -> ControlH {
        ControlH::from_coeffs(self.grid.nt, self.grid.nk, self.grid.dt(), coeffs).expect("finite")
    }
}

fn initial_contribution(model: &ModelSpec, grid: &GridSpec, fft: &FftNd, freqs: &[f64]) -> Result<Vec<Vec<f64>>> {
    let dim = model.cov.dim();
    let n = grid.points(dim);
    let (a0, a1, width) = match model.init {
        InitialCondition::Zero => return Ok(vec![vec![0.0; n]; grid.nt + 1]),
        InitialCondition::Bump { u0, u1, width } => (u0, u1, width),
    };
    let bump: Vec<f64> = (0..n)
        .map(|p| {
            let r2: f64 = unflatten(p, grid.nx, dim)
                .iter()
                .map(|&i| {
                    let x = -grid.half_width + i as f64 * grid.dx();
                    x * x
                })
                .sum();
            (-r2 / (2.0 * width * width)).exp()
        })
        .collect();
    let mut scratch = Vec::new();
    let mut hat: Vec<Complex64> = bump.iter().map(|&v| Complex64::new(v / n as f64, 0.0)).collect();
    fft.forward(&mut hat, &mut scratch);
    let op = model.cov.operator();
    let rows = (0..=grid.nt)
        .map(|j| {
            let t = j as f64 * grid.dt();
            let mut spec: Vec<Complex64> = hat
                .iter()
                .zip(freqs)
                .map(|(h, &r)| match op {
                    Operator::Wave => h * (a0 * fourier_lambda_dt_wave(t, r) + a1 * fourier_lambda_radial(op, t, r)),
                    Operator::Heat => h * (a0 * fourier_lambda_radial(op, t, r)),
                })
                .collect();
            fft.inverse(&mut spec, &mut scratch);
            spec.iter().map(|v| v.re).collect()
        })
        .collect();
    Ok(rows)
}

/// Solves the noisy equation on `path`.
pub fn simulate(model: &ModelSpec, grid: &GridSpec, path: &NoisePath) -> Result<Field> {
    let prop = Propagator::new(model, grid)?;
    let c = prop.drive_coeffs(Some(path), model.eps, None)?;
    let traj = prop.forward(&c, grid.nt)?;
    Ok(Field::from_rows(grid, model.cov.dim(), &traj.u))
}

/// Solves the equation driven by `path` shifted by `eps^{-1} h`, written with the extra
/// deterministic term `<Lambda sigma(u), h>_{H_T}`.
pub fn simulate_shifted(model: &ModelSpec, grid: &GridSpec, path: &NoisePath, h: &ControlH) -> Result<Field> {
    let prop = Propagator::new(model, grid)?;
    let c = prop.drive_coeffs(Some(path), model.eps, Some(h))?;
    let traj = prop.forward(&c, grid.nt)?;
    Ok(Field::from_rows(grid, model.cov.dim(), &traj.u))
}

/// Malliavin derivative `D u(t, x)` as an element of `H_T`, for `u` computed by
/// [`simulate`] on the same path. Slices with `r >= t` vanish.
pub fn first_variation(
    model: &ModelSpec,
    grid: &GridSpec,
    path: &NoisePath,
    u: &Field,
    obs: &Observation,
) -> Result<ControlH> {
    let prop = Propagator::new(model, grid)?;
    first_variation_with(&prop, path, u, obs)
}

pub fn first_variation_with(prop: &Propagator, path: &NoisePath, u: &Field, obs: &Observation) -> Result<ControlH> {
    let grid = prop.grid();
    let needed = (grid.nt + 1) * prop.points() * 3 * std::mem::size_of::<Complex64>();
    if needed > MEMORY_BUDGET {
        return Err(Error::GridTooLarge { needed, budget: MEMORY_BUDGET });
    }
    let eps = prop.model().eps;
    let c = prop.drive_coeffs(Some(path), eps, None)?;
    let mut buf = vec![Complex64::new(0.0, 0.0); prop.points()];
    let mut scratch = Vec::new();
    let nm = prop.modes().len();
    let n = obs.time_index;
    let traj = Trajectory {
        u: (0..=n).map(|j| u.row(j).to_vec()).collect(),
        drive: (0..n).map(|i| prop.synthesize(&c[i * nm..(i + 1) * nm], &mut buf, &mut scratch)).collect(),
    };
    let g = prop.adjoint(&traj, obs.point_index, false)?;
    Ok(prop.to_control(g.into_iter().map(|v| eps * v).collect()))
}

/// Picard iteration of the discrete mild map started from `w`; returns the sup-norm
/// distances between successive iterates. The final iterate is checked against the
/// forward solution.
pub fn picard_verify(model: &ModelSpec, grid: &GridSpec, path: &NoisePath, iters: usize) -> Result<Vec<f64>> {
    if iters < 2 {
        return Err(Error::InvalidInput(format!("Picard verification needs at least 2 iterations, got {iters}")));
    }
    let prop = Propagator::new(model, grid)?;
    let c = prop.drive_coeffs(Some(path), model.eps, None)?;
    let exact = prop.forward(&c, grid.nt)?;
    let mut current: Vec<Vec<f64>> = (0..=grid.nt).map(|j| prop.w(j).to_vec()).collect();
    let mut residuals = Vec::with_capacity(iters);
    for it in 1..=iters {
        let next = prop.mild_map(&current, &exact.drive);
        let r = sup_diff(&next, &current);
        if !r.is_finite() || (residuals.first().is_some_and(|&r0: &f64| r > 1e6 * r0.max(1e-300))) {
            return Err(Error::PicardDivergence { iteration: it });
        }
        residuals.push(r);
        current = next;
    }
    if iters > grid.nt {
        let gap = sup_diff(&current, &exact.u);
        if gap > 1e-10 {
            return Err(Error::InvalidInput(format!("Picard limit differs from the forward solution by {gap:e}")));
        }
    }
    Ok(residuals)
}

fn sup_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().zip(b).flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs())).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covkernel::{g1, Correlation};

    fn white_grid() -> GridSpec {
        GridSpec::new(1.5, 64, 16, 1.0, 32, 3).unwrap()
    }

    #[test]
    fn coefficient_registry() {
        let s = Coefficient::default_sigma();
        assert_eq!(s.value(0.0), 1.25);
        assert!((s.derivative(1.0) + 0.25 * 1f64.sin()).abs() < 1e-15);
        assert_eq!(s.inf_abs(), 0.75);
        let b = Coefficient::default_drift();
        assert_eq!(b.sup_abs(), 0.5);
        assert!((b.derivative(0.0) - 0.5).abs() < 1e-15);
        let a = Coefficient::AffineClamped { a: 1.0, b: 2.0, lo: -0.25, hi: 1.0 };
        assert_eq!(a.value(5.0), 3.0);
        assert_eq!(a.derivative(5.0), 0.0);
        assert_eq!(a.inf_abs(), 0.5);
        assert!(Coefficient::Const { c: 0.0 }.is_zero());
    }

    #[test]
    fn model_validation() {
        let cov = CovarianceSpec::wave_white();
        assert!(ModelSpec::linear(cov, 0.5).validate().is_ok());
        assert!(ModelSpec::linear(cov, 0.0).validate().is_err());
        let mut m = ModelSpec::nonlinear_default(cov, InitialCondition::Zero, 1.0);
        assert!(m.validate().is_ok());
        m.sigma0 = 0.9;
        assert!(m.validate().is_err());
    }

    #[test]
    fn observation_snapping() {
        let g = white_grid();
        let o = Observation::new(&g, 1.0, &[0.0]).unwrap();
        assert_eq!(o.time_index, 16);
        assert_eq!(o.point_index, 32);
        assert!(Observation::new(&g, 0.03, &[0.0]).is_err());
        assert!(Observation::new(&g, 1.0, &[0.01]).is_err());
    }

    #[test]
    fn noiseless_driftless_limit_is_w() {
        let cov = CovarianceSpec::wave_white();
        let g = white_grid();
        let mut m = ModelSpec::nonlinear_default(cov, InitialCondition::Bump { u0: 0.5, u1: 0.2, width: 0.2 }, 1e-12);
        m.drift = Coefficient::Const { c: 0.0 };
        let prop = Propagator::new(&m, &g).unwrap();
        let path = prop.sample_path(0);
        let u = simulate(&m, &g, &path).unwrap();
        for j in 0..=g.nt {
            for (a, b) in u.row(j).iter().zip(prop.w(j)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn wave_initial_contribution_is_dalembert() {
        // d = 1: w(t, x) = (u0(x-t) + u0(x+t))/2 + (1/2) int_{x-t}^{x+t} u1
        let cov = CovarianceSpec::wave_white();
        let g = GridSpec::new(3.0, 256, 8, 1.0, 16, 0).unwrap();
        let width = 0.2;
        let m = ModelSpec { init: InitialCondition::Bump { u0: 1.0, u1: 0.0, width }, ..ModelSpec::linear(cov, 0.5) };
        let prop = Propagator::new(&m, &g).unwrap();
        let bump = |x: f64| (-x * x / (2.0 * width * width)).exp();
        let j = 4;
        let t = j as f64 * g.dt();
        for p in (0..g.nx).step_by(16) {
            let x = -g.half_width + p as f64 * g.dx();
            let want = 0.5 * (bump(x - t) + bump(x + t));
            assert!((prop.w(j)[p] - want).abs() < 1e-8, "x={x}: {} vs {want}", prop.w(j)[p]);
        }
    }

    #[test]
    fn discrete_g1_tracks_closed_form() {
        let cov = CovarianceSpec::wave_white();
        let g = GridSpec::new(1.25, 1024, 32, 1.0, 512, 0).unwrap();
        let prop = Propagator::new(&ModelSpec::linear(cov, 1.0), &g).unwrap();
        let d = prop.discrete_g1(32, 32);
        assert!((d / 0.25 - 1.0).abs() < 1e-3, "{d}");
        let o = Observation::new(&g, 1.0, &[0.0]).unwrap();
        assert!((prop.lambda_direction(&o).norm_sq() - d).abs() < 1e-12);
        assert!((prop.discrete_mass_integral(32) - 0.5).abs() < 1e-12);
        let half = prop.discrete_g1(32, 16);
        assert!((half / g1(&cov, 0.5).unwrap() - 1.0).abs() < 2e-3);
    }

    #[test]
    fn synthesized_field_covariance_matches_spectrum() {
        let cov = CovarianceSpec::new(Correlation::Riesz { beta: 0.5 }, 1, Operator::Wave).unwrap();
        let g = GridSpec::new(2.0, 32, 64, 1.0, 8, 17).unwrap();
        let prop = Propagator::new(&ModelSpec::linear(cov, 1.0), &g).unwrap();
        let mut buf = vec![Complex64::new(0.0, 0.0); prop.points()];
        let mut scratch = Vec::new();
        let lag = 3usize;
        let mut prods = Vec::new();
        for stream in 0..500 {
            let p = prop.sample_path(stream);
            for i in 0..g.nt {
                let f = prop.synthesize(p.row(i), &mut buf, &mut scratch);
                for x in 0..g.nx {
                    prods.push(f[x] * f[(x + lag) % g.nx] / g.dt());
                }
            }
        }
        let n = prods.len() as f64;
        let mean = prods.iter().sum::<f64>() / n;
        // samples within a row are correlated; use row-block means for the standard error
        let block = g.nx;
        let means: Vec<f64> = prods.chunks(block).map(|c| c.iter().sum::<f64>() / block as f64).collect();
        let mm = means.iter().sum::<f64>() / means.len() as f64;
        let var = means.iter().map(|v| (v - mm).powi(2)).sum::<f64>() / (means.len() - 1) as f64;
        let se = (var / means.len() as f64).sqrt();
        let want = prop.modes().covariance_at_lag(&[-(lag as i64)]);
        assert!((mean - want).abs() < 3.0 * se, "{mean} vs {want} (se {se})");
    }

    #[test]
    fn shift_identity_is_exact() {
        let cov = CovarianceSpec::wave_white();
        let g = white_grid();
        let m = ModelSpec::nonlinear_default(cov, InitialCondition::Bump { u0: 0.3, u1: 0.0, width: 0.3 }, 0.5);
        let prop = Propagator::new(&m, &g).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
        let h = ControlH::random(g.nt, g.nk, prop.modes().len(), g.dt(), 1.5, &mut rng);
        let path = prop.sample_path(2);
        let a = simulate(&m, &g, &path.shifted(&h, 1.0 / m.eps).unwrap()).unwrap();
        let b = simulate_shifted(&m, &g, &path, &h).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
        let zero = prop.zero_control();
        assert_eq!(simulate_shifted(&m, &g, &path, &zero).unwrap(), simulate(&m, &g, &path).unwrap());
    }

    #[test]
    fn adjoint_matches_tangent() {
        let cov = CovarianceSpec::wave_white();
        let g = GridSpec::new(1.5, 32, 8, 1.0, 6, 3).unwrap();
        let m = ModelSpec::nonlinear_default(cov, InitialCondition::Bump { u0: 0.4, u1: 0.1, width: 0.3 }, 0.7);
        let prop = Propagator::new(&m, &g).unwrap();
        let path = prop.sample_path(0);
        let c = prop.drive_coeffs(Some(&path), m.eps, None).unwrap();
        let obs = Observation::new(&g, 1.0, &[0.0]).unwrap();
        let traj = prop.forward(&c, obs.time_index).unwrap();
        let grad = prop.adjoint(&traj, obs.point_index, false).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(5);
        for _ in 0..3 {
            let dir: Vec<f64> = (0..c.len()).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
            let du = prop.tangent(&traj, &dir);
            let lhs = du[obs.time_index][obs.point_index];
            let rhs: f64 = grad.iter().zip(&dir).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-11 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn linear_malliavin_norm_is_eps_squared_g1() {
        let cov = CovarianceSpec::wave_white();
        let g = white_grid();
        let m = ModelSpec::linear(cov, 0.3);
        let prop = Propagator::new(&m, &g).unwrap();
        let obs = Observation::new(&g, 1.0, &[0.0]).unwrap();
        let path = prop.sample_path(4);
        let u = simulate(&m, &g, &path).unwrap();
        let d = first_variation(&m, &g, &path, &u, &obs).unwrap();
        let want = 0.09 * prop.discrete_g1(obs.time_index, obs.time_index);
        assert!((d.norm_sq() - want).abs() < 1e-12 * want.max(1.0));
        // r-slices at or after t vanish
        let half = Observation::new(&g, 0.5, &[0.0]).unwrap();
        let dh = first_variation(&m, &g, &path, &u, &half).unwrap();
        for i in half.time_index..g.nt {
            assert!(dh.row(i).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn picard_iteration() {
        let cov = CovarianceSpec::wave_white();
        let g = white_grid();
        let lin = ModelSpec::linear(cov, 0.8);
        let prop = Propagator::new(&lin, &g).unwrap();
        let path = prop.sample_path(1);
        let r = picard_verify(&lin, &g, &path, 3).unwrap();
        assert!(r[0] > 0.0);
        assert_eq!(r[1], 0.0);
        let nl = ModelSpec::nonlinear_default(cov, InitialCondition::Bump { u0: 0.5, u1: 0.0, width: 0.3 }, 0.8);
        let r = picard_verify(&nl, &g, &path, g.nt + 2).unwrap();
        assert!(r.windows(2).all(|w| w[1] <= w[0]), "{r:?}");
        assert!(r[g.nt] < 1e-12);
        assert!(matches!(picard_verify(&nl, &g, &path, 0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn field_binary_layout() {
        let cov = CovarianceSpec::wave_white();
        let g = GridSpec::new(1.5, 8, 4, 1.0, 2, 0).unwrap();
        let m = ModelSpec::linear(cov, 1.0);
        let prop = Propagator::new(&m, &g).unwrap();
        let u = simulate(&m, &g, &prop.sample_path(0)).unwrap();
        let mut buf = Vec::new();
        u.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 40 + 8 * 5 * 8);
        assert_eq!(u64::from_le_bytes(buf[0..8].try_into().unwrap()), 4);
        assert_eq!(f64::from_le_bytes(buf[32..40].try_into().unwrap()), 1.5);
        let mut csv_buf = Vec::new();
        u.write_slice_csv(4, &mut csv_buf).unwrap();
        assert_eq!(String::from_utf8(csv_buf).unwrap().lines().count(), 9);
    }
}
