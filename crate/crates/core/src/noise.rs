//! Discrete cylindrical Wiener process on a periodic space-time grid, the Hilbert space
//! of controls `H_T`, and the dyadic smoothing / localization used by the support
//! experiments.
//!
//! The spatial noise is expanded on cosine/sine pairs `c_m cos(2 pi xi_m.(x+L))`,
//! `c_m sin(2 pi xi_m.(x+L))` of the torus `[-L, L)^d`, with `xi_m = m / (2L)` and
//! `c_m^2 = 2 mu(xi_m) (2L)^{-d}`. Each pair consumes two independent Brownian
//! coordinates; white noise adds the constant mode with `c_0^2 = (2L)^{-d}`, Riesz
//! correlations drop it. A control `h` in `H_T` is piecewise constant in time with one
//! coefficient per (slab, coordinate) and `||h||^2 = sum_i dt sum_k h(i,k)^2`.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::covkernel::{spectral_density_radial, CovarianceSpec, Operator};
use crate::error::{Error, Result};
use crate::spectral::{bin_of, flatten};

/// Upper bound on the heat kernel mass leaving the torus at the horizon.
pub const HEAT_TAIL_TOL: f64 = 1e-12;

/// Periodic discretization of `[0, T] x [-L, L)^d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Torus half-width `L`.
    pub half_width: f64,
    /// Spatial points per axis.
    pub nx: usize,
    /// Time steps on `[0, T]`.
    pub nt: usize,
    /// Horizon `T`.
    pub horizon: f64,
    /// Retained signed frequencies per axis are `|m| < nk`.
    pub nk: usize,
    pub seed: u64,
}

impl GridSpec {
    pub fn new(half_width: f64, nx: usize, nt: usize, horizon: f64, nk: usize, seed: u64) -> Result<Self> {
        let g = Self { half_width, nx, nt, horizon, nk, seed };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.half_width > 0.0 && self.half_width.is_finite()) {
            return Err(Error::Grid(format!("half-width must be positive, got {}", self.half_width)));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Grid(format!("horizon must be positive, got {}", self.horizon)));
        }
        if self.nx < 2 || self.nx % 2 != 0 {
            return Err(Error::Grid(format!("nx must be even and >= 2, got {}", self.nx)));
        }
        if self.nt == 0 {
            return Err(Error::Grid("nt must be positive".into()));
        }
        if self.nk == 0 || self.nk > self.nx / 2 {
            return Err(Error::Grid(format!(
                "retained modes nk = {} must satisfy 1 <= nk <= nx/2 = {}",
                self.nk,
                self.nx / 2
            )));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.nt as f64
    }

    pub fn dx(&self) -> f64 {
        2.0 * self.half_width / self.nx as f64
    }

    pub fn points(&self, dim: usize) -> usize {
        self.nx.pow(dim as u32)
    }

    /// Checks that an observation at `(t, x)` sees no periodic wraparound: finite
    /// propagation for the wave operator, Gaussian tail mass for the heat operator.
    pub fn check_domain(&self, cov: &CovarianceSpec, x: &[f64]) -> Result<()> {
        if x.len() != cov.dim() {
            return Err(Error::Grid(format!("observation point has {} coordinates, need {}", x.len(), cov.dim())));
        }
        let xmax = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        match cov.operator() {
            Operator::Wave => {
                if self.half_width <= xmax + self.horizon {
                    return Err(Error::Grid(format!(
                        "wave grid needs L > |x| + T, got L = {}, |x| = {xmax}, T = {}",
                        self.half_width, self.horizon
                    )));
                }
            }
            Operator::Heat => {
                let tail = heat_tail_mass(self.half_width, self.horizon, cov.dim());
                if tail >= HEAT_TAIL_TOL {
                    return Err(Error::Grid(format!(
                        "heat kernel mass {tail:e} outside [-L, L)^d exceeds {HEAT_TAIL_TOL:e}; increase L"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Mass of the heat kernel at time `t` outside `[-L, L]^d` (union bound over axes).
pub fn heat_tail_mass(half_width: f64, t: f64, dim: usize) -> f64 {
    dim as f64 * erfc(half_width / (2.0 * t.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModeKind {
    Zero,
    Cos,
    Sin,
}

/// One Brownian coordinate of the spatial noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub wavevector: Vec<i64>,
    pub kind: ModeKind,
    /// `|xi|`
    pub frequency: f64,
    /// Amplitude `c_m` of the basis function.
    pub weight: f64,
    /// Flat FFT bin of `+m` and of `-m`.
    pub bin: usize,
    pub conj_bin: usize,
}

/// Retained coordinates ordered by increasing `|xi|`, ties broken lexicographically by
/// wavevector, cosine before sine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSet {
    modes: Vec<Mode>,
    nx: usize,
    dim: usize,
    half_width: f64,
}

impl ModeSet {
    pub fn new(grid: &GridSpec, cov: &CovarianceSpec) -> Result<Self> {
        grid.validate()?;
        let dim = cov.dim();
        let span = 2 * grid.nk - 1;
        let count = span.pow(dim as u32);
        let dxi = 1.0 / (2.0 * grid.half_width);
        let cell = dxi.powi(dim as i32);
        let mut vectors: Vec<(f64, Vec<i64>)> = Vec::new();
        for flat in 0..count {
            let mut rest = flat;
            let mut m = vec![0i64; dim];
            for a in (0..dim).rev() {
                m[a] = (rest % span) as i64 - (grid.nk as i64 - 1);
                rest /= span;
            }
            let first = m.iter().find(|&&v| v != 0).copied();
            let keep = match first {
                None => !cov.is_riesz(),
                Some(v) => v > 0,
            };
            if keep {
                let f = m.iter().map(|&v| (v as f64 * dxi).powi(2)).sum::<f64>().sqrt();
                vectors.push((f, m));
            }
        }
        vectors.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        let mut modes = Vec::with_capacity(2 * vectors.len());
        for (f, m) in vectors {
            let bins: Vec<usize> = m.iter().map(|&v| bin_of(v, grid.nx)).collect();
            let conj: Vec<usize> = m.iter().map(|&v| bin_of(-v, grid.nx)).collect();
            let (bin, conj_bin) = (flatten(&bins, grid.nx), flatten(&conj, grid.nx));
            if f == 0.0 {
                let density = spectral_density_radial(cov, 0.0)?;
                modes.push(Mode {
                    wavevector: m,
                    kind: ModeKind::Zero,
                    frequency: 0.0,
                    weight: (density * cell).sqrt(),
                    bin,
                    conj_bin,
                });
            } else {
                let w = (2.0 * spectral_density_radial(cov, f)? * cell).sqrt();
                for kind in [ModeKind::Cos, ModeKind::Sin] {
                    modes.push(Mode { wavevector: m.clone(), kind, frequency: f, weight: w, bin, conj_bin });
                }
            }
        }
        Ok(Self { modes, nx: grid.nx, dim, half_width: grid.half_width })
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Basis function `k` at grid multi-index `idx`.
    pub fn basis_value(&self, k: usize, idx: &[usize]) -> f64 {
        let mode = &self.modes[k];
        let phase: f64 = mode.wavevector.iter().zip(idx).map(|(&m, &j)| m as f64 * j as f64).sum::<f64>()
            * 2.0
            * std::f64::consts::PI
            / self.nx as f64;
        match mode.kind {
            ModeKind::Zero => mode.weight,
            ModeKind::Cos => mode.weight * phase.cos(),
            ModeKind::Sin => mode.weight * phase.sin(),
        }
    }

    /// Discrete spatial covariance `sum_k phi_k(x) phi_k(y)` at lag `x - y` (grid units
    /// per axis), evaluated by direct summation over the retained spectrum.
    pub fn covariance_at_lag(&self, lag: &[i64]) -> f64 {
        let mut acc = 0.0;
        for mode in &self.modes {
            let phase: f64 = mode.wavevector.iter().zip(lag).map(|(&m, &l)| (m * l) as f64).sum::<f64>()
                * 2.0
                * std::f64::consts::PI
                / self.nx as f64;
            acc += match mode.kind {
                ModeKind::Zero => mode.weight * mode.weight,
                // cos a cos b + sin a sin b = cos(a - b), split over the pair
                ModeKind::Cos | ModeKind::Sin => 0.5 * mode.weight * mode.weight * phase.cos(),
            };
        }
        acc
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }
}

/// Brownian increments `W_k(Delta_i)` on the time grid, row-major `[nt x modes]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath {
    nt: usize,
    nk: usize,
    n_modes: usize,
    dt: f64,
    increments: Vec<f64>,
}

impl NoisePath {
    /// Draws the path of replica `stream`. `(grid.seed, stream)` determine every entry;
    /// row `i` is generated from its own keystream block, so rows are addressable
    /// independently of generation order.
    pub fn sample(grid: &GridSpec, modes: &ModeSet, stream: u64) -> Self {
        let n_modes = modes.len();
        let dt = grid.dt();
        let sd = dt.sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(grid.seed);
        rng.set_stream(stream);
        let mut increments = Vec::with_capacity(grid.nt * n_modes);
        for i in 0..grid.nt {
            rng.set_word_pos((i as u128) << 36);
            for _ in 0..n_modes {
                let z: f64 = rng.sample(StandardNormal);
                increments.push(sd * z);
            }
        }
        Self { nt: grid.nt, nk: grid.nk, n_modes, dt, increments }
    }

    pub fn zeros(grid: &GridSpec, n_modes: usize) -> Self {
        Self { nt: grid.nt, nk: grid.nk, n_modes, dt: grid.dt(), increments: vec![0.0; grid.nt * n_modes] }
    }

    pub fn from_increments(nt: usize, nk: usize, dt: f64, increments: Vec<f64>) -> Result<Self> {
        if nt == 0 || increments.len() % nt != 0 {
            return Err(Error::Shape(format!("{} increments do not fill {nt} rows", increments.len())));
        }
        let n_modes = increments.len() / nt;
        Ok(Self { nt, nk, n_modes, dt, increments })
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    pub fn nk(&self) -> usize {
        self.nk
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.increments[i * self.n_modes + k]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.increments[i * self.n_modes..(i + 1) * self.n_modes]
    }

    /// Path shifted by `scale * h`, i.e. `W_k(Delta_i) + scale * h(i,k) dt`.
    pub fn shifted(&self, h: &ControlH, scale: f64) -> Result<Self> {
        self.check_control(h)?;
        let increments = self.increments.iter().zip(h.coeffs()).map(|(w, c)| w + scale * c * self.dt).collect();
        Ok(Self { increments, ..self.clone() })
    }

    /// Sums consecutive blocks of `factor` time steps.
    pub fn coarsen_time(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.nt % factor != 0 {
            return Err(Error::Grid(format!("cannot coarsen {} steps by {factor}", self.nt)));
        }
        let nt = self.nt / factor;
        let mut increments = vec![0.0; nt * self.n_modes];
        for i in 0..self.nt {
            let coarse = i / factor;
            for k in 0..self.n_modes {
                increments[coarse * self.n_modes + k] += self.get(i, k);
            }
        }
        Ok(Self { nt, nk: self.nk, n_modes: self.n_modes, dt: self.dt * factor as f64, increments })
    }

    fn check_control(&self, h: &ControlH) -> Result<()> {
        if h.nt() != self.nt || h.n_modes() != self.n_modes {
            return Err(Error::Shape(format!(
                "control is {}x{}, path is {}x{}",
                h.nt(),
                h.n_modes(),
                self.nt,
                self.n_modes
            )));
        }
        Ok(())
    }

    pub fn write_binary<W: Write>(&self, out: W) -> Result<()> {
        write_flat(out, self.nt, self.nk, self.dt, &self.increments)
    }

    pub fn read_binary<R: Read>(input: R) -> Result<Self> {
        let (nt, nk, dt, data) = read_flat(input)?;
        Self::from_increments(nt, nk, dt, data)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_long_csv(out, self.nt, self.n_modes, &self.increments)
    }
}

/// Element of `H_T`: one coefficient per (time slab, coordinate).
#[derive(Debug, Clone, PartialEq)]
pub struct ControlH {
    nt: usize,
    nk: usize,
    n_modes: usize,
    dt: f64,
    coeffs: Vec<f64>,
    norm_sq: f64,
}

impl ControlH {
    pub fn zeros(nt: usize, nk: usize, n_modes: usize, dt: f64) -> Self {
        Self { nt, nk, n_modes, dt, coeffs: vec![0.0; nt * n_modes], norm_sq: 0.0 }
    }

    pub fn zeros_on(grid: &GridSpec, modes: &ModeSet) -> Self {
        Self::zeros(grid.nt, grid.nk, modes.len(), grid.dt())
    }

    pub fn from_coeffs(nt: usize, nk: usize, dt: f64, coeffs: Vec<f64>) -> Result<Self> {
        if nt == 0 || coeffs.len() % nt != 0 {
            return Err(Error::Shape(format!("{} coefficients do not fill {nt} slabs", coeffs.len())));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput("control coefficients must be finite".into()));
        }
        let n_modes = coeffs.len() / nt;
        let norm_sq = dt * coeffs.iter().map(|c| c * c).sum::<f64>();
        Ok(Self { nt, nk, n_modes, dt, coeffs, norm_sq })
    }

    /// Same shape as `self` with new coefficients.
    pub fn with_coeffs(&self, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != self.coeffs.len() {
            return Err(Error::Shape(format!("expected {} coefficients, got {}", self.coeffs.len(), coeffs.len())));
        }
        Self::from_coeffs(self.nt, self.nk, self.dt, coeffs)
    }

    /// Standard Gaussian coefficients scaled so that `||h|| = norm`.
    pub fn random(nt: usize, nk: usize, n_modes: usize, dt: f64, norm: f64, rng: &mut impl Rng) -> Self {
        let raw: Vec<f64> = (0..nt * n_modes).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let h = Self::from_coeffs(nt, nk, dt, raw).expect("finite");
        let n = h.norm();
        if n == 0.0 {
            h
        } else {
            h.scaled(norm / n)
        }
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    pub fn nk(&self) -> usize {
        self.nk
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.coeffs[i * self.n_modes + k]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.coeffs[i * self.n_modes..(i + 1) * self.n_modes]
    }

    pub fn norm_sq(&self) -> f64 {
        self.norm_sq
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq.sqrt()
    }

    pub fn scaled(&self, a: f64) -> Self {
        self.with_coeffs(self.coeffs.iter().map(|c| a * c).collect()).expect("same shape")
    }

    /// `self + a * other`
    pub fn axpy(&self, a: f64, other: &ControlH) -> Result<Self> {
        check_same(self, other)?;
        self.with_coeffs(self.coeffs.iter().zip(&other.coeffs).map(|(x, y)| x + a * y).collect())
    }

    pub fn write_binary<W: Write>(&self, out: W) -> Result<()> {
        write_flat(out, self.nt, self.nk, self.dt, &self.coeffs)
    }

    pub fn read_binary<R: Read>(input: R) -> Result<Self> {
        let (nt, nk, dt, data) = read_flat(input)?;
        Self::from_coeffs(nt, nk, dt, data)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_long_csv(out, self.nt, self.n_modes, &self.coeffs)
    }
}

fn check_same(a: &ControlH, b: &ControlH) -> Result<()> {
    if a.nt != b.nt || a.n_modes != b.n_modes || a.dt != b.dt {
        return Err(Error::Shape(format!(
            "controls on different grids: {}x{} (dt {}) vs {}x{} (dt {})",
            a.nt, a.n_modes, a.dt, b.nt, b.n_modes, b.dt
        )));
    }
    Ok(())
}

/// `<a, b>_{H_T} = sum_i dt sum_k a(i,k) b(i,k)`.
pub fn ht_inner(a: &ControlH, b: &ControlH) -> Result<f64> {
    check_same(a, b)?;
    Ok(a.dt * a.coeffs.iter().zip(&b.coeffs).map(|(x, y)| x * y).sum::<f64>())
}

/// Increments of `path` over the dyadic intervals of level `n`, `[2^n x modes]`.
fn dyadic_increments(path: &NoisePath, level: u32) -> Result<Vec<f64>> {
    let blocks = 1usize.checked_shl(level).ok_or_else(|| Error::Grid(format!("level {level} too large")))?;
    if path.nt % blocks != 0 {
        return Err(Error::Grid(format!("2^{level} does not divide nt = {}", path.nt)));
    }
    Ok(path.coarsen_time(path.nt / blocks)?.increments)
}

/// Piecewise-constant smoothed noise of level `n`: on the dyadic interval `Delta_{i}`,
/// `i >= 1`, coordinate `k < n` carries `2^n T^{-1} W_k(Delta_{i-1})`; it vanishes on
/// `[0, 2^{-n} T)` and for `k >= n`. With fewer than `n` modes all of them are kept.
pub fn smooth_vn(path: &NoisePath, level: u32) -> Result<ControlH> {
    let n = (level as usize).min(path.n_modes);
    let coarse = dyadic_increments(path, level)?;
    let blocks = 1usize << level;
    let per_block = path.nt / blocks;
    let horizon = path.dt * path.nt as f64;
    let rate = blocks as f64 / horizon;
    let mut coeffs = vec![0.0; path.nt * path.n_modes];
    for i in per_block..path.nt {
        let block = i / per_block;
        for k in 0..n {
            coeffs[i * path.n_modes + k] = rate * coarse[(block - 1) * path.n_modes + k];
        }
    }
    ControlH::from_coeffs(path.nt, path.nk, path.dt, coeffs)
}

/// Whether the localization event `L_n(t)` holds: every dyadic increment of the first
/// `n` coordinates up to index `floor(2^n t / T - 1)_+` is bounded by `2^{n(theta-1)}`.
pub fn localization_holds(path: &NoisePath, level: u32, theta: f64, t: f64) -> Result<bool> {
    if !(theta > 0.5) {
        return Err(Error::InvalidInput(format!("localization needs theta > 1/2, got {theta}")));
    }
    let n = (level as usize).min(path.n_modes);
    let coarse = dyadic_increments(path, level)?;
    let blocks = 1usize << level;
    let horizon = path.dt * path.nt as f64;
    let last = ((blocks as f64 * t / horizon - 1.0).floor().max(0.0) as usize).min(blocks - 1);
    let bound = 2f64.powf(level as f64 * (theta - 1.0));
    for i in 0..=last {
        for k in 0..n {
            if coarse[i * path.n_modes + k].abs() > bound {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Exact `||v^n||^2` bound on `L_n(T)`: `(2^n/T)(2^n - 1) n 2^{2n(theta-1)}`.
pub fn smoothed_norm_bound(level: u32, theta: f64, horizon: f64, n_modes: usize) -> f64 {
    let blocks = (1u64 << level) as f64;
    let n = (level as usize).min(n_modes) as f64;
    blocks / horizon * (blocks - 1.0) * n * 2f64.powf(2.0 * level as f64 * (theta - 1.0))
}

fn write_flat<W: Write>(mut out: W, nt: usize, nk: usize, dt: f64, data: &[f64]) -> Result<()> {
    out.write_all(&(nt as u64).to_le_bytes())?;
    out.write_all(&(nk as u64).to_le_bytes())?;
    out.write_all(&dt.to_le_bytes())?;
    for v in data {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

fn read_flat<R: Read>(mut input: R) -> Result<(usize, usize, f64, Vec<f64>)> {
    let mut word = [0u8; 8];
    input.read_exact(&mut word)?;
    let nt = u64::from_le_bytes(word) as usize;
    input.read_exact(&mut word)?;
    let nk = u64::from_le_bytes(word) as usize;
    input.read_exact(&mut word)?;
    let dt = f64::from_le_bytes(word);
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if rest.len() % 8 != 0 {
        return Err(Error::Shape("payload is not a whole number of f64 values".into()));
    }
    let data = rest.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok((nt, nk, dt, data))
}

fn write_long_csv<W: Write>(out: W, nt: usize, n_modes: usize, data: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["slab", "mode", "value"])?;
    for i in 0..nt {
        for k in 0..n_modes {
            w.write_record([i.to_string(), k.to_string(), data[i * n_modes + k].to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
