//! Periodic grids and d-dimensional complex FFTs built from one-dimensional `rustfft`
//! plans.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Forward/inverse FFT over an `nx^d` row-major array. Both directions are unnormalized.
#[derive(Clone)]
pub struct FftNd {
    nx: usize,
    dim: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for FftNd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FftNd").field("nx", &self.nx).field("dim", &self.dim).finish()
    }
}

impl FftNd {
    pub fn new(nx: usize, dim: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self { nx, dim, forward: planner.plan_fft_forward(nx), inverse: planner.plan_fft_inverse(nx) }
    }

    pub fn len(&self) -> usize {
        self.nx.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn forward(&self, data: &mut [Complex64], scratch: &mut Vec<Complex64>) {
        self.run(&self.forward, data, scratch);
    }

    pub fn inverse(&self, data: &mut [Complex64], scratch: &mut Vec<Complex64>) {
        self.run(&self.inverse, data, scratch);
    }

    fn run(&self, plan: &Arc<dyn Fft<f64>>, data: &mut [Complex64], scratch: &mut Vec<Complex64>) {
        debug_assert_eq!(data.len(), self.len());
        let need = plan.get_inplace_scratch_len().max(self.nx);
        if scratch.len() < need {
            scratch.resize(need, Complex64::new(0.0, 0.0));
        }
        // last axis is contiguous
        plan.process_with_scratch(data, &mut scratch[..plan.get_inplace_scratch_len()]);
        if self.dim == 1 {
            return;
        }
        let nx = self.nx;
        let mut line = vec![Complex64::new(0.0, 0.0); nx];
        let total = self.len();
        for axis in 0..self.dim - 1 {
            let stride = nx.pow((self.dim - 1 - axis) as u32);
            let block = stride * nx;
            for base in (0..total).step_by(block) {
                for offset in 0..stride {
                    let start = base + offset;
                    for (j, v) in line.iter_mut().enumerate() {
                        *v = data[start + j * stride];
                    }
                    plan.process_with_scratch(&mut line, &mut scratch[..plan.get_inplace_scratch_len()]);
                    for (j, v) in line.iter().enumerate() {
                        data[start + j * stride] = *v;
                    }
                }
            }
        }
    }
}

/// Signed frequency index of FFT bin `q` on an axis of `nx` points.
pub fn signed_index(q: usize, nx: usize) -> i64 {
    if q < nx / 2 {
        q as i64
    } else {
        q as i64 - nx as i64
    }
}

/// FFT bin of signed index `m`.
pub fn bin_of(m: i64, nx: usize) -> usize {
    m.rem_euclid(nx as i64) as usize
}

/// Multi-index of a flat row-major position.
pub fn unflatten(mut flat: usize, nx: usize, dim: usize) -> Vec<usize> {
    let mut idx = vec![0; dim];
    for a in (0..dim).rev() {
        idx[a] = flat % nx;
        flat /= nx;
    }
    idx
}

pub fn flatten(idx: &[usize], nx: usize) -> usize {
    idx.iter().fold(0, |acc, &i| acc * nx + i)
}

/// `|xi|` for every FFT bin of an `nx^d` grid on a torus of side `2L`.
pub fn bin_frequencies(nx: usize, dim: usize, half_width: f64) -> Vec<f64> {
    let total = nx.pow(dim as u32);
    (0..total)
        .map(|flat| {
            unflatten(flat, nx, dim)
                .iter()
                .map(|&q| {
                    let xi = signed_index(q, nx) as f64 / (2.0 * half_width);
                    xi * xi
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}
