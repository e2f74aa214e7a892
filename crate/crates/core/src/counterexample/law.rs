//! Heteroscedastic counterexample law and its population variances.
//!
//! `X` has density `p_delta` (a truncated `1/(1+x^4)` component mixed with a
//! centred normal) and `Y | X ~ N(X beta, c1 + c2 X^2 1{X >= 0})`. The working
//! variance is two-piece: `gamma_1` for `x >= 0`, `gamma_2` for `x < 0`.

use std::f64::consts::PI;

use super::quadrature::{geometric_breaks, integrate_with_breaks, QuadratureSettings};
use crate::error::{Error, Result};

/// Largest `delta` the search in [`find_delta_for_eta`] will try.
pub const DELTA_LIMIT: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CounterexampleSpec {
    /// Standard deviation of `X`.
    pub tau: f64,
    /// Mean conditional variance `E[Var(Y | X)]`.
    pub sigma2: f64,
    pub c_tilde: f64,
    pub delta: f64,
}

impl CounterexampleSpec {
    pub fn new(tau: f64, sigma2: f64, c_tilde: f64, delta: f64) -> Result<Self> {
        let s = Self { tau, sigma2, c_tilde, delta };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(self.tau) && ok(self.sigma2) && ok(self.delta)) {
            return Err(Error::InvalidArgument("tau, sigma2 and delta must be positive".into()));
        }
        if !(self.c_tilde > 0.0 && self.c_tilde <= 1.0) {
            return Err(Error::InvalidArgument(format!("c_tilde must lie in (0, 1], got {}", self.c_tilde)));
        }
        Ok(())
    }

    pub fn with_delta(&self, delta: f64) -> Self {
        Self { delta, ..*self }
    }

    /// `max(1/2, 1 - tau^2 / 2)`.
    pub fn lambda2(&self) -> f64 {
        0.5f64.max(1.0 - 0.5 * self.tau * self.tau)
    }

    /// `2 sigma^2 / (2 + c_tilde tau^2)`.
    pub fn c1(&self) -> f64 {
        2.0 * self.sigma2 / (2.0 + self.c_tilde * self.tau * self.tau)
    }

    pub fn c2(&self) -> f64 {
        self.c_tilde * self.c1()
    }

    /// `sigma^2(x) = c1 + c2 x^2 1{x >= 0}`.
    pub fn conditional_variance(&self, x: f64) -> f64 {
        if x >= 0.0 {
            self.c1() + self.c2() * x * x
        } else {
            self.c1()
        }
    }

    /// Closed-form EQML and GEE population minimizers `(c1 + c2 tau^2, c1)`.
    pub fn population_minimizers(&self) -> (f64, f64) {
        (self.c1() + self.c2() * self.tau * self.tau, self.c1())
    }

    /// Coefficient `k` of the lower bound `k B(delta)` on the divergence ratio.
    pub fn lower_bound_coefficient(&self) -> f64 {
        let (c1, c2, t2) = (self.c1(), self.c2(), self.tau * self.tau);
        c1 * c2 * (1.0 - self.lambda2()) / (2.0 * t2 * (c1 + 2.0 * c2 * t2))
    }
}

/// [`CounterexampleSpec`] with its quadrature-derived constants.
#[derive(Clone, Debug, PartialEq)]
pub struct Law {
    pub spec: CounterexampleSpec,
    pub settings: QuadratureSettings,
    /// `int_0^delta 1/(1+x^4)`, `x^2/(1+x^4)` and `x^4/(1+x^4)`.
    pub q0: f64,
    pub q2: f64,
    pub q4: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub rho: f64,
    pub nu2: f64,
}

impl Law {
    pub fn new(spec: CounterexampleSpec, settings: QuadratureSettings) -> Result<Self> {
        spec.validate()?;
        settings.validate()?;
        let breaks = geometric_breaks(spec.delta);
        let q = |k: i32| integrate_with_breaks(|x| x.powi(k) / (1.0 + x.powi(4)), &breaks, &settings).map(|r| r.value);
        let (q0, q2, q4) = (q(0)?, q(2)?, q(4)?);
        let lambda2 = spec.lambda2();
        let rho = q2 / q0;
        let nu2 = spec.tau * spec.tau / lambda2 - (1.0 - lambda2) * rho / lambda2;
        if !(nu2 > 0.0) {
            return Err(Error::InvalidArgument(format!("normal component variance {nu2} is not positive")));
        }
        Ok(Self { spec, settings, q0, q2, q4, lambda1: (1.0 - lambda2) / (2.0 * q0), lambda2, rho, nu2 })
    }

    /// `B(delta) = int_0^delta x^4/(1+x^4) / int_0^delta 1/(1+x^4)`.
    pub fn b_delta(&self) -> f64 {
        self.q4 / self.q0
    }

    pub fn lower_bound(&self) -> f64 {
        self.spec.lower_bound_coefficient() * self.b_delta()
    }

    pub fn density(&self, x: f64) -> f64 {
        let quartic = if x.abs() <= self.spec.delta { self.lambda1 / (1.0 + x.powi(4)) } else { 0.0 };
        quartic + self.lambda2 * normal_pdf(x, self.nu2)
    }

    /// `E[f(X) 1{X >= 0}]`, component by component.
    pub fn expect_positive<F: Fn(f64) -> f64>(&self, f: F) -> Result<f64> {
        let quartic = integrate_with_breaks(|x| f(x) / (1.0 + x.powi(4)), &geometric_breaks(self.spec.delta), &self.settings)?;
        let nu = self.nu2.sqrt();
        let end = self.settings.gaussian_truncation * nu;
        let breaks: Vec<f64> = geometric_breaks(end / nu).into_iter().map(|b| b * nu).collect();
        let normal = integrate_with_breaks(|x| f(x) * normal_pdf(x, self.nu2), &breaks, &self.settings)?;
        Ok(self.lambda1 * quartic.value + self.lambda2 * normal.value)
    }

    /// `E[f(X) 1{X < 0}]`, by symmetry of `p_delta`.
    pub fn expect_negative<F: Fn(f64) -> f64>(&self, f: F) -> Result<f64> {
        self.expect_positive(|x| if x > 0.0 { f(-x) } else { 0.0 })
    }

    pub fn expect<F: Fn(f64) -> f64>(&self, f: F) -> Result<f64> {
        Ok(self.expect_positive(&f)? + self.expect_negative(&f)?)
    }

    /// Asymptotic variance of the weighted least squares slope with two-piece weights:
    /// `E[X^2/nu]^{-2} E[sigma^2(X) X^2 / nu^2]`.
    pub fn population_sandwich_v(&self, gamma1: f64, gamma2: f64) -> Result<f64> {
        if !(gamma1 > 0.0 && gamma2 > 0.0) {
            return Err(Error::InvalidParams("two-piece variances must be positive".into()));
        }
        let s = &self.spec;
        let bread = self.expect_positive(|x| x * x)? / gamma1 + self.expect_negative(|x| x * x)? / gamma2;
        let meat = self.expect_positive(|x| s.conditional_variance(x) * x * x)? / (gamma1 * gamma1)
            + self.expect_negative(|x| s.conditional_variance(x) * x * x)? / (gamma2 * gamma2);
        Ok(meat / (bread * bread))
    }

    /// `E[X^2 / sigma^2(X)]^{-1}`, the variance under the true inverse-variance weights.
    pub fn optimal_variance(&self) -> Result<f64> {
        let s = &self.spec;
        Ok(1.0 / self.expect(|x| x * x / s.conditional_variance(x))?)
    }

    /// `(E[sigma^2 | X >= 0], E[sigma^2 | X < 0])` by quadrature.
    pub fn population_minimizers_quadrature(&self) -> Result<(f64, f64)> {
        let s = &self.spec;
        let pp = self.expect_positive(|_| 1.0)?;
        let pn = self.expect_negative(|_| 1.0)?;
        Ok((
            self.expect_positive(|x| s.conditional_variance(x))? / pp,
            self.expect_negative(|x| s.conditional_variance(x))? / pn,
        ))
    }

    /// Minimizes the scalar population EQML loss `E[log nu + sigma^2/nu]` and
    /// GEE loss `E[(sigma^2 - nu)^2]` piece by piece.
    pub fn population_minimizers_numeric(&self) -> Result<((f64, f64), (f64, f64))> {
        let s = &self.spec;
        let mut eqml = [0.0; 2];
        let mut gee = [0.0; 2];
        for (k, positive) in [true, false].into_iter().enumerate() {
            let e = |f: &dyn Fn(f64) -> f64| if positive { self.expect_positive(f) } else { self.expect_negative(f) };
            let m0 = e(&|_| 1.0)?;
            let m1 = e(&|x| s.conditional_variance(x))?;
            let m2 = e(&|x| s.conditional_variance(x).powi(2))?;
            let (lo, hi) = ((1e-3 * s.sigma2).ln(), (1e3 * s.sigma2).ln());
            eqml[k] = golden_section(|t| m0 * t + m1 * (-t).exp(), lo, hi, 1e-10).exp();
            gee[k] = golden_section(|t| m2 - 2.0 * t.exp() * m1 + t.exp().powi(2) * m0, lo, hi, 1e-10).exp();
        }
        Ok(((eqml[0], eqml[1]), (gee[0], gee[1])))
    }

    /// Infimum of [`Self::population_sandwich_v`] over two-piece weights by
    /// golden-section search per coordinate (two sweeps, log scale).
    pub fn two_piece_infimum(&self) -> Result<((f64, f64), f64)> {
        let (mut g1, mut g2) = self.spec.population_minimizers();
        let span = 12.0;
        for _ in 0..2 {
            let c1 = g1.ln();
            let t = golden_section(|t| self.population_sandwich_v(t.exp(), g2).unwrap_or(f64::INFINITY), c1 - span, c1 + span, 1e-6);
            g1 = t.exp();
            let c2 = g2.ln();
            let t = golden_section(|t| self.population_sandwich_v(g1, t.exp()).unwrap_or(f64::INFINITY), c2 - span, c2 + span, 1e-6);
            g2 = t.exp();
        }
        Ok(((g1, g2), self.population_sandwich_v(g1, g2)?))
    }

    /// Closed form of the two-piece infimum: `(a+^2/s+ + a-^2/s-)^{-1}` with
    /// `a = E[X^2 1{piece}]`, `s = E[sigma^2 X^2 1{piece}]`.
    pub fn two_piece_infimum_closed(&self) -> Result<f64> {
        let s = &self.spec;
        let ap = self.expect_positive(|x| x * x)?;
        let an = self.expect_negative(|x| x * x)?;
        let sp = self.expect_positive(|x| s.conditional_variance(x) * x * x)?;
        let sn = self.expect_negative(|x| s.conditional_variance(x) * x * x)?;
        Ok(1.0 / (ap * ap / sp + an * an / sn))
    }

    /// `I(c, delta) = 1/2 int_0^inf p_delta(x) {log(1 + c x^2) + 1/(1 + c x^2) - 1} dx`,
    /// the Kullback-Leibler divergence from the homoscedastic witness law.
    pub fn kl_integral(&self, c: f64) -> Result<f64> {
        Ok(0.5 * self.expect_positive(|x| {
            let u = c * x * x;
            u.ln_1p() + 1.0 / (1.0 + u) - 1.0
        })?)
    }

    pub fn divergence(&self) -> Result<DivergenceReport> {
        let gamma = self.spec.population_minimizers();
        let v_eqml = self.population_sandwich_v(gamma.0, gamma.1)?;
        let v_opt = self.optimal_variance()?;
        let (gamma_two_piece, v_two_piece) = self.two_piece_infimum()?;
        Ok(DivergenceReport {
            delta: self.spec.delta,
            b_delta: self.b_delta(),
            lower_bound: self.lower_bound(),
            ratio: v_eqml / v_opt,
            two_piece_ratio: v_eqml / v_two_piece,
            gamma_eqml: gamma,
            gamma_two_piece,
            v_eqml,
            v_opt,
            v_two_piece,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DivergenceReport {
    pub delta: f64,
    pub b_delta: f64,
    /// Analytic lower bound on `ratio`.
    pub lower_bound: f64,
    /// `V(gamma_EQML) / E[X^2 / sigma^2(X)]^{-1}`.
    pub ratio: f64,
    /// `V(gamma_EQML) / inf` over two-piece weights.
    pub two_piece_ratio: f64,
    pub gamma_eqml: (f64, f64),
    pub gamma_two_piece: (f64, f64),
    pub v_eqml: f64,
    pub v_opt: f64,
    pub v_two_piece: f64,
}

fn normal_pdf(x: f64, var: f64) -> f64 {
    (-0.5 * x * x / var).exp() / (2.0 * PI * var).sqrt()
}

/// Minimizer of a unimodal `f` on `[a, b]` to absolute tolerance `tol`.
pub fn golden_section<F: FnMut(f64) -> f64>(mut f: F, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Divergence report at `delta`.
pub fn divergence_ratio(spec: &CounterexampleSpec, settings: &QuadratureSettings) -> Result<DivergenceReport> {
    Law::new(*spec, *settings)?.divergence()
}

fn ratio_at(spec: &CounterexampleSpec, delta: f64, settings: &QuadratureSettings) -> Result<f64> {
    let law = Law::new(spec.with_delta(delta), *settings)?;
    let g = spec.population_minimizers();
    Ok(law.population_sandwich_v(g.0, g.1)? / law.optimal_variance()?)
}

/// Smallest `delta` (to three significant figures) at which the divergence ratio
/// reaches `eta`: doubling from 1, then bisection.
pub fn find_delta_for_eta(tau: f64, sigma2: f64, c_tilde: f64, eta: f64, settings: &QuadratureSettings) -> Result<f64> {
    if !(eta >= 1.0 && eta.is_finite()) {
        return Err(Error::InvalidArgument(format!("eta must be finite and >= 1, got {eta}")));
    }
    let spec = CounterexampleSpec::new(tau, sigma2, c_tilde, 1.0)?;
    let mut hi = 1.0;
    while ratio_at(&spec, hi, settings)? < eta {
        hi *= 2.0;
        if hi > DELTA_LIMIT {
            return Err(Error::DeltaSearch { eta, limit: DELTA_LIMIT });
        }
    }
    let mut lo = if hi == 1.0 { 0.0 } else { 0.5 * hi };
    while (hi - lo) > 5e-4 * hi {
        let mid = 0.5 * (lo + hi);
        if ratio_at(&spec, mid, settings)? >= eta {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(round_sig(hi, 3))
}

fn round_sig(x: f64, digits: i32) -> f64 {
    let mag = 10f64.powi(digits - 1 - x.abs().log10().floor() as i32);
    (x * mag).ceil() / mag
}
