//! Derivative-free Nelder-Mead minimization in unconstrained coordinates.
//!
//! Failed objective evaluations count as `+inf`, so the simplex retreats from them.

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NelderMeadSettings {
    /// Edge length of the initial simplex along each axis.
    pub init_scale: f64,
    /// Stop when `f_max - f_min <= tol * max(|f_min|, 1e-300)`.
    pub tol: f64,
    /// Also stop once the simplex has collapsed below this diameter.
    pub x_tol: f64,
    pub max_evals: usize,
}

impl Default for NelderMeadSettings {
    fn default() -> Self {
        Self { init_scale: 0.5, tol: 1e-6, x_tol: 1e-9, max_evals: 2000 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
    pub converged: bool,
    /// Best value seen after each evaluation.
    pub trace: Vec<f64>,
}

struct Counter<F> {
    f: F,
    evals: usize,
    best_x: Vec<f64>,
    best: f64,
    trace: Vec<f64>,
}

impl<F: FnMut(&[f64]) -> Option<f64>> Counter<F> {
    fn eval(&mut self, x: &[f64]) -> f64 {
        self.evals += 1;
        let v = match (self.f)(x) {
            Some(v) if v.is_finite() => v,
            _ => f64::INFINITY,
        };
        if v < self.best {
            self.best = v;
            self.best_x = x.to_vec();
        }
        self.trace.push(self.best);
        v
    }
}

fn lerp(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + t * (y - x)).collect()
}

/// Minimizes `f` from `x0`. `f` returns `None` for inadmissible or failed points.
///
/// The returned point is the best one ever evaluated.
pub fn minimize<F>(f: F, x0: &[f64], settings: &NelderMeadSettings) -> NelderMeadResult
where
    F: FnMut(&[f64]) -> Option<f64>,
{
    let n = x0.len();
    let mut c = Counter { f, evals: 0, best_x: x0.to_vec(), best: f64::INFINITY, trace: Vec::new() };
    let f0 = c.eval(x0);
    if n == 0 {
        return NelderMeadResult { x: vec![], value: f0, evaluations: 1, converged: f0.is_finite(), trace: c.trace };
    }
    let mut simplex: Vec<(Vec<f64>, f64)> = vec![(x0.to_vec(), f0)];
    for k in 0..n {
        let mut x = x0.to_vec();
        x[k] += settings.init_scale;
        let v = c.eval(&x);
        simplex.push((x, v));
    }

    let mut converged = false;
    while c.evals < settings.max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (lo, hi) = (simplex[0].1, simplex[n].1);
        let diameter = simplex[1..]
            .iter()
            .map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if lo.is_finite() && (hi - lo <= settings.tol * lo.abs().max(1e-300) || diameter <= settings.x_tol) {
            converged = true;
            break;
        }
        let centroid: Vec<f64> = (0..n).map(|k| simplex[..n].iter().map(|(x, _)| x[k]).sum::<f64>() / n as f64).collect();
        let worst = simplex[n].0.clone();
        let xr = lerp(&centroid, &worst, -1.0);
        let fr = c.eval(&xr);
        if fr < simplex[0].1 {
            let xe = lerp(&centroid, &worst, -2.0);
            let fe = c.eval(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < simplex[n].1 {
            let x = lerp(&centroid, &xr, 0.5);
            let v = c.eval(&x);
            (x, v)
        } else {
            let x = lerp(&centroid, &worst, 0.5);
            let v = c.eval(&x);
            (x, v)
        };
        if fc < simplex[n].1.min(fr) {
            simplex[n] = (xc, fc);
            continue;
        }
        let best = simplex[0].0.clone();
        for entry in simplex.iter_mut().skip(1) {
            let x = lerp(&best, &entry.0, 0.5);
            let v = c.eval(&x);
            *entry = (x, v);
        }
    }
    NelderMeadResult { x: c.best_x, value: c.best, evaluations: c.evals, converged, trace: c.trace }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_bowl() {
        let r = minimize(|x| Some((x[0] - 1.0).powi(2) + 3.0 * (x[1] + 2.0).powi(2) + 1.0), &[0.0, 0.0], &NelderMeadSettings { tol: 1e-14, ..Default::default() });
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] + 2.0).abs() < 1e-5);
    }

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| Some(100.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2));
        let r = minimize(f, &[-1.2, 1.0], &NelderMeadSettings { tol: 1e-14, x_tol: 1e-12, max_evals: 5000, ..Default::default() });
        assert!((r.x[0] - 1.0).abs() < 1e-4 && (r.x[1] - 1.0).abs() < 1e-4, "{:?}", r.x);
    }

    #[test]
    fn avoids_failed_region() {
        let f = |x: &[f64]| if x[0] < 0.3 { None } else { Some((x[0] - 0.5).powi(2)) };
        let r = minimize(f, &[1.0], &NelderMeadSettings { tol: 1e-12, ..Default::default() });
        assert!((r.x[0] - 0.5).abs() < 1e-4);
    }

    #[test]
    fn trace_is_monotone_and_ends_at_value() {
        let r = minimize(|x| Some(x[0].sin() + 0.1 * x[0] * x[0]), &[2.0], &NelderMeadSettings::default());
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(*r.trace.last().unwrap(), r.value);
        assert_eq!(r.trace.len(), r.evaluations);
    }

    #[test]
    fn zero_dimensional() {
        let r = minimize(|_| Some(4.0), &[], &NelderMeadSettings::default());
        assert_eq!(r.value, 4.0);
        assert!(r.converged);
    }
}
