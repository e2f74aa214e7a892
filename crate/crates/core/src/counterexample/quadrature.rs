//! Globally adaptive 15-point Gauss-Kronrod quadrature.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadratureSettings {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_subdivisions: usize,
    /// Gaussian components are integrated out to this many standard deviations.
    pub gaussian_truncation: f64,
}

impl Default for QuadratureSettings {
    fn default() -> Self {
        Self { abs_tol: 1e-9, rel_tol: 1e-8, max_subdivisions: 2000, gaussian_truncation: 40.0 }
    }
}

impl QuadratureSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.abs_tol > 0.0 && self.rel_tol > 0.0 && self.max_subdivisions > 0 && self.gaussian_truncation > 0.0) {
            return Err(Error::InvalidArgument("quadrature tolerances must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Integral {
    pub value: f64,
    pub error: f64,
    pub subdivisions: usize,
}

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
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
// Gauss weights for nodes XGK[1], XGK[3], XGK[5], XGK[7]
const WG: [f64; 4] = [0.129_484_966_168_869_7, 0.279_705_391_489_276_7, 0.381_830_050_505_118_9, 0.417_959_183_673_469_4];

struct Segment {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Segment {}
impl PartialOrd for Segment {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Segment {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

fn kronrod<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> Segment {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = WGK[7] * fc;
    let mut g = WG[3] * fc;
    for j in 0..7 {
        let dx = h * XGK[j];
        let s = f(c - dx) + f(c + dx);
        k += WGK[j] * s;
        if j % 2 == 1 {
            g += WG[j / 2] * s;
        }
    }
    Segment { a, b, value: k * h, error: ((k - g) * h).abs() }
}

/// Integrates `f` over consecutive segments between sorted `points`.
///
/// Interior points mark kinks or scale changes; the worst segment is bisected
/// until the total error estimate is within tolerance.
pub fn integrate_with_breaks<F: FnMut(f64) -> f64>(mut f: F, points: &[f64], settings: &QuadratureSettings) -> Result<Integral> {
    settings.validate()?;
    if points.len() < 2 || points.iter().any(|p| !p.is_finite()) || points.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidArgument("breakpoints must be finite and sorted".into()));
    }
    let mut heap: BinaryHeap<Segment> = points.windows(2).filter(|w| w[1] > w[0]).map(|w| kronrod(&mut f, w[0], w[1])).collect();
    let mut subdivisions = heap.len();
    loop {
        let value: f64 = heap.iter().map(|s| s.value).sum();
        let error: f64 = heap.iter().map(|s| s.error).sum();
        if !value.is_finite() {
            return Err(Error::Quadrature { value, error });
        }
        if error <= settings.abs_tol.max(settings.rel_tol * value.abs()) {
            return Ok(Integral { value, error, subdivisions });
        }
        if subdivisions >= settings.max_subdivisions {
            return Err(Error::Quadrature { value, error });
        }
        let worst = heap.pop().expect("non-empty");
        let mid = 0.5 * (worst.a + worst.b);
        if !(mid > worst.a && mid < worst.b) {
            return Err(Error::Quadrature { value, error });
        }
        heap.push(kronrod(&mut f, worst.a, mid));
        heap.push(kronrod(&mut f, mid, worst.b));
        subdivisions += 1;
    }
}

/// `int_a^b f(x) dx`.
pub fn integrate<F: FnMut(f64) -> f64>(f: F, a: f64, b: f64, settings: &QuadratureSettings) -> Result<Integral> {
    if b < a {
        return integrate(f, b, a, settings).map(|r| Integral { value: -r.value, ..r });
    }
    integrate_with_breaks(f, &[a, b], settings)
}

/// `int_a^inf f(x) dx` through `x = a + t / (1 - t)`.
pub fn integrate_to_infinity<F: FnMut(f64) -> f64>(mut f: F, a: f64, settings: &QuadratureSettings) -> Result<Integral> {
    let g = |t: f64| {
        let s = 1.0 - t;
        f(a + t / s) / (s * s)
    };
    integrate_with_breaks(g, &[0.0, 0.5, 0.9, 0.99, 1.0], settings)
}

/// `0, 1, 2, 4, ...` up to `end`: breakpoints for integrands concentrated near zero.
pub fn geometric_breaks(end: f64) -> Vec<f64> {
    let mut out = vec![0.0];
    let mut x = 1.0;
    while x < end {
        out.push(x);
        x *= 2.0;
    }
    if end > 0.0 {
        out.push(end);
    }
    out
}
