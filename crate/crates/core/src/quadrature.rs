//! Globally adaptive Gauss-Kronrod (7/15) quadrature on finite intervals.

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];

const WGK: [f64; 8] = [
    0.022_935_322_010_529_225,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];

// Gauss weights for the nodes XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] =
    [0.129_484_966_168_869_7, 0.279_705_391_489_276_7, 0.381_830_050_505_118_9, 0.417_959_183_673_469_4];

#[derive(Debug, Clone, Copy)]
struct Segment {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

fn kronrod15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> Segment {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for j in 0..7 {
        let dx = half * XGK[j];
        let pair = f(center - dx) + f(center + dx);
        kronrod += WGK[j] * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    Segment { a, b, value: kronrod * half, error: ((kronrod - gauss) * half).abs() }
}

/// Outcome of an adaptive integration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Integral {
    pub value: f64,
    pub error: f64,
    pub segments: usize,
}

/// Adaptive quadrature of `f` over `[a, b]`, bisecting the worst segment until the
/// summed error estimate is below `abs_tol` or `max_segments` is reached.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, abs_tol: f64, max_segments: usize) -> Result<Integral> {
    integrate_breakpoints(f, &[a, b], abs_tol, max_segments)
}

/// As [`integrate`], starting from the partition given by `points` (sorted).
pub fn integrate_breakpoints<F: Fn(f64) -> f64>(
    f: F,
    points: &[f64],
    abs_tol: f64,
    max_segments: usize,
) -> Result<Integral> {
    if points.len() < 2 {
        return Err(Error::InvalidInput("quadrature needs at least two points".into()));
    }
    let mut segments: Vec<Segment> =
        points.windows(2).filter(|w| w[1] > w[0]).map(|w| kronrod15(&f, w[0], w[1])).collect();
    if segments.is_empty() {
        return Ok(Integral { value: 0.0, error: 0.0, segments: 0 });
    }
    loop {
        let error: f64 = segments.iter().map(|s| s.error).sum();
        if error <= abs_tol {
            break;
        }
        if segments.len() >= max_segments {
            return Err(Error::Quadrature { tolerance: abs_tol, achieved: error });
        }
        let (worst, _) = segments.iter().enumerate().max_by(|x, y| x.1.error.total_cmp(&y.1.error)).expect("non-empty");
        let seg = segments.swap_remove(worst);
        let mid = 0.5 * (seg.a + seg.b);
        if !(mid > seg.a && mid < seg.b) {
            // Interval no longer divisible in floating point.
            let achieved = error;
            return Err(Error::Quadrature { tolerance: abs_tol, achieved });
        }
        segments.push(kronrod15(&f, seg.a, mid));
        segments.push(kronrod15(&f, mid, seg.b));
    }
    // Sum small contributions first.
    segments.sort_by(|x, y| x.value.abs().total_cmp(&y.value.abs()));
    Ok(Integral {
        value: segments.iter().map(|s| s.value).sum(),
        error: segments.iter().map(|s| s.error).sum(),
        segments: segments.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_is_exact() {
        let r = integrate(|x| x.powi(5) - 2.0 * x * x, 0.0, 2.0, 1e-12, 10).unwrap();
        assert!((r.value - (64.0 / 6.0 - 16.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn algebraic_endpoint_singularity() {
        // int_0^1 x^{-1/2} dx = 2
        let r = integrate(|x: f64| x.powf(-0.5), 0.0, 1.0, 1e-9, 2000).unwrap();
        assert!((r.value - 2.0).abs() < 1e-8, "{}", r.value);
    }

    #[test]
    fn oscillatory_with_breakpoints() {
        let pts: Vec<f64> = (0..=40).map(|k| k as f64 * std::f64::consts::PI / 2.0).collect();
        let r = integrate_breakpoints(|x: f64| x.sin().powi(2), &pts, 1e-11, 5000).unwrap();
        assert!((r.value - 10.0 * std::f64::consts::PI).abs() < 1e-9);
    }

    #[test]
    fn reports_failure() {
        let r = integrate(|x: f64| 1.0 / x, 0.0, 1.0, 1e-9, 50);
        assert!(matches!(r, Err(Error::Quadrature { .. })));
    }
}
