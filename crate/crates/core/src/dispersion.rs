//! Dispersion objectives and their minimization over the working-covariance parameters.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::glm::{variance_diag, ClusterDataset, ClusterView, GlmFamily, TargetContrast};
use crate::nelder_mead::{self, NelderMeadResult, NelderMeadSettings};
use crate::qml::{fit_view, glm_start, QmlSolution, ScoringSettings};
use crate::sandwich::{large_sample_from_solution, loss_from_solution};
use crate::scalar::Real;
use crate::working_cov::{cluster_weights, working_matrix, CovarianceStructure, DispersionParams, UnconstrainedParams};

/// Largest number of optimized dispersion coordinates.
pub const MAX_FREE_PARAMS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ObjectiveKind {
    /// Finite-sample empirical sandwich loss.
    Sandwich,
    /// Plug-in large-sample sandwich loss.
    SandwichLargeSample,
    /// Gaussian pseudo-likelihood `sum log det Sigma_i + r' Sigma_i^{-1} r`.
    Eqml,
    /// Least squares of Pearson residual cross-products against the working matrix.
    Gee,
    /// No weighting: independence working covariance.
    Unweighted,
}

impl ObjectiveKind {
    pub fn label(self) -> &'static str {
        match self {
            ObjectiveKind::Sandwich => "sandwich",
            ObjectiveKind::SandwichLargeSample => "sandwich_large_sample",
            ObjectiveKind::Eqml => "eqml",
            ObjectiveKind::Gee => "gee",
            ObjectiveKind::Unweighted => "unweighted",
        }
    }

    pub fn is_sandwich(self) -> bool {
        matches!(self, ObjectiveKind::Sandwich | ObjectiveKind::SandwichLargeSample)
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "sandwich" => ObjectiveKind::Sandwich,
            "sandwich_large_sample" => ObjectiveKind::SandwichLargeSample,
            "eqml" => ObjectiveKind::Eqml,
            "gee" => ObjectiveKind::Gee,
            "unweighted" | "none" => ObjectiveKind::Unweighted,
            other => return Err(Error::InvalidArgument(format!("unknown objective `{other}`"))),
        })
    }
}

/// An objective kind plus, for the sandwich kinds, the contrast it targets.
#[derive(Clone, Debug, PartialEq)]
pub struct DispersionObjective<T: Real> {
    kind: ObjectiveKind,
    target: Option<TargetContrast<T>>,
}

impl<T: Real> DispersionObjective<T> {
    pub fn new(kind: ObjectiveKind, target: Option<TargetContrast<T>>) -> Result<Self> {
        if kind.is_sandwich() != target.is_some() {
            return Err(Error::InvalidArgument(format!(
                "objective {kind} {} a target contrast",
                if kind.is_sandwich() { "requires" } else { "does not take" }
            )));
        }
        Ok(Self { kind, target })
    }

    pub fn sandwich(c: TargetContrast<T>) -> Self {
        Self { kind: ObjectiveKind::Sandwich, target: Some(c) }
    }

    pub fn sandwich_large_sample(c: TargetContrast<T>) -> Self {
        Self { kind: ObjectiveKind::SandwichLargeSample, target: Some(c) }
    }

    pub fn eqml() -> Self {
        Self { kind: ObjectiveKind::Eqml, target: None }
    }

    pub fn gee() -> Self {
        Self { kind: ObjectiveKind::Gee, target: None }
    }

    pub fn unweighted() -> Self {
        Self { kind: ObjectiveKind::Unweighted, target: None }
    }

    pub fn kind(&self) -> ObjectiveKind {
        self.kind
    }

    pub fn target(&self) -> Option<&TargetContrast<T>> {
        self.target.as_ref()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerSettings {
    /// Number of Nelder-Mead starts: one at the initial point, the rest perturbed.
    pub restarts: usize,
    /// Initial simplex edge and perturbation standard deviation, unconstrained scale.
    pub init_scale: f64,
    /// Relative tolerance on the simplex objective spread.
    pub tol: f64,
    pub max_evals: usize,
    pub seed: u64,
    /// Outer beta/gamma alternation rounds for EQML and GEE.
    pub max_rounds: usize,
    /// Alternation stops when gamma moves less than this (sup norm).
    pub gamma_tol: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self { restarts: 5, init_scale: 0.5, tol: 1e-6, max_evals: 2000, seed: 0, max_rounds: 10, gamma_tol: 1e-6 }
    }
}

impl OptimizerSettings {
    fn validate(&self) -> Result<()> {
        if self.restarts == 0 || self.max_evals == 0 || self.max_rounds == 0 {
            return Err(Error::InvalidArgument("optimizer counts must be positive".into()));
        }
        if !(self.init_scale > 0.0 && self.tol > 0.0 && self.gamma_tol > 0.0) {
            return Err(Error::InvalidArgument("optimizer scales and tolerances must be positive".into()));
        }
        Ok(())
    }

    fn nelder_mead(&self) -> NelderMeadSettings {
        NelderMeadSettings { init_scale: self.init_scale, tol: self.tol, max_evals: self.max_evals, ..Default::default() }
    }
}

/// Result of a dispersion fit: `gamma_hat` and `beta_hat = beta_tilde(gamma_hat)`.
#[derive(Clone, Debug)]
pub struct SandregFit<T: Real> {
    pub beta: DVector<T>,
    pub gamma: DispersionParams<T>,
    pub theta: UnconstrainedParams<T>,
    pub structure: CovarianceStructure,
    pub kind: ObjectiveKind,
    /// Objective at the winner (zero for the unweighted fit).
    pub value: f64,
    /// Best-so-far objective after each evaluation of the winning start.
    pub trace: Vec<f64>,
    pub converged: bool,
    pub evaluations: usize,
    /// Outer alternation rounds (1 for the sandwich kinds).
    pub rounds: usize,
    /// Sup norm of the central-difference gradient of the objective at the winner,
    /// over the optimized coordinates.
    pub stationarity: f64,
    /// Group-size bound used for the exchangeable parametrization.
    pub n_max: usize,
    pub solution: QmlSolution<T>,
}

impl<T: Real> SandregFit<T> {
    pub fn num_clusters(&self) -> usize {
        self.solution.num_clusters()
    }
}

/// `sum_i [log det Sigma_i + r_i' Sigma_i^{-1} r_i]` with residuals at `beta`.
pub fn eqml_objective<T: Real>(
    dataset: &ClusterDataset<T>,
    family: &GlmFamily,
    structure: &CovarianceStructure,
    gamma: &DispersionParams<T>,
    beta: &DVector<T>,
) -> Result<T> {
    eqml_parts(&dataset.view(), family, structure, gamma, beta).map(|(ld, q, _)| ld + q)
}

/// `(sum log det, sum quadratic form, n)` at the given gamma.
fn eqml_parts<T: Real>(
    view: &ClusterView<'_, T>,
    family: &GlmFamily,
    structure: &CovarianceStructure,
    gamma: &DispersionParams<T>,
    beta: &DVector<T>,
) -> Result<(T, T, usize)> {
    let items: Vec<_> = view.iter().collect();
    let parts = items
        .par_iter()
        .map(|(i, c)| {
            let cw = cluster_weights(c, *i, family, beta, structure, gamma)?;
            let r = c.y() - crate::glm::mean_vector(c, family, beta);
            let q = (r.transpose() * &cw.w * &r)[(0, 0)];
            Ok((cw.log_det, q, c.len()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().fold((T::zero(), T::zero(), 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2)))
}

/// Pearson cross-product matrices `A^{-1/2} r r' A^{-1/2}` and unit-scale working matrices.
fn gee_parts<T: Real>(
    view: &ClusterView<'_, T>,
    family: &GlmFamily,
    structure: &CovarianceStructure,
    gamma: &DispersionParams<T>,
    beta: &DVector<T>,
) -> Result<Vec<(DMatrix<T>, DMatrix<T>)>> {
    let items: Vec<_> = view.iter().collect();
    items
        .par_iter()
        .map(|(i, c)| {
            let a = variance_diag(c, family, beta, *i)?;
            let r = c.y() - crate::glm::mean_vector(c, family, beta);
            let e = r.zip_map(&a, |rj, aj| rj / aj.sqrt());
            let p = working_matrix(structure, gamma, c)?;
            Ok((&e * e.transpose(), p))
        })
        .collect()
}

fn with_unit_scale<T: Real>(structure: &CovarianceStructure, gamma: &DispersionParams<T>) -> DispersionParams<T> {
    let mut g = gamma.clone();
    if let Some(k) = structure.scale_index() {
        g.0[k] = T::one();
    }
    g
}

fn frobenius_sq<T: Real>(m: &DMatrix<T>) -> T {
    m.iter().fold(T::zero(), |s, v| s + *v * *v)
}

/// Closed-form GEE scale `sum <E_i, P_i> / sum ||P_i||^2` for unit-scale `P_i`.
fn gee_scale<T: Real>(parts: &[(DMatrix<T>, DMatrix<T>)]) -> T {
    let (num, den) = parts
        .iter()
        .fold((T::zero(), T::zero()), |(n, d), (e, p)| (n + e.component_mul(p).sum(), d + frobenius_sq(p)));
    (num / den).max(T::of(1e-300))
}

/// `sum_i ||A_i^{-1/2} r_i r_i' A_i^{-1/2} - phi P_i(gamma)||_F^2` with residuals at `beta`.
///
/// With a free scale, `phi` is profiled out in closed form and the scale entry of
/// `gamma` is ignored.
pub fn gee_objective<T: Real>(
    dataset: &ClusterDataset<T>,
    family: &GlmFamily,
    structure: &CovarianceStructure,
    gamma: &DispersionParams<T>,
    beta: &DVector<T>,
) -> Result<T> {
    gee_profiled(&dataset.view(), family, structure, gamma, beta).map(|(v, _)| v)
}

/// GEE value and the scale used.
fn gee_profiled<T: Real>(
    view: &ClusterView<'_, T>,
    family: &GlmFamily,
    structure: &CovarianceStructure,
    gamma: &DispersionParams<T>,
    beta: &DVector<T>,
) -> Result<(T, T)> {
    let unit = with_unit_scale(structure, gamma);
    let parts = gee_parts(view, family, structure, &unit, beta)?;
    let phi = if structure.scale_index().is_some() { gee_scale(&parts) } else { T::one() };
    let value = parts.iter().fold(T::zero(), |s, (e, p)| s + frobenius_sq(&(e - p * phi)));
    Ok((value, phi))
}

/// EQML value with a free scale profiled out (`phi = sum r'P^{-1}r / n`) and the scale used.
fn eqml_profiled<T: Real>(
    view: &ClusterView<'_, T>,
    family: &GlmFamily,
    structure: &CovarianceStructure,
    gamma: &DispersionParams<T>,
    beta: &DVector<T>,
) -> Result<(T, T)> {
    if structure.scale_index().is_none() {
        let (ld, q, _) = eqml_parts(view, family, structure, gamma, beta)?;
        return Ok((ld + q, T::one()));
    }
    let unit = with_unit_scale(structure, gamma);
    let (ld, q, n) = eqml_parts(view, family, structure, &unit, beta)?;
    let nf = T::of(n as f64);
    let phi = (q / nf).max(T::of(1e-300));
    Ok((ld + nf * phi.ln() + nf, phi))
}

/// The objective restricted to the optimized coordinates, with the remaining
/// unconstrained coordinates held fixed.
#[derive(Clone, Debug)]
pub(crate) struct Profile<'a, T: Real> {
    pub family: &'a GlmFamily,
    pub structure: &'a CovarianceStructure,
    pub kind: ObjectiveKind,
    pub target: Option<&'a TargetContrast<T>>,
    pub free: Vec<usize>,
    pub base: Vec<f64>,
    pub n_max: usize,
    pub scoring: ScoringSettings,
}

impl<'a, T: Real> Profile<'a, T> {
    pub fn new(
        family: &'a GlmFamily,
        structure: &'a CovarianceStructure,
        kind: ObjectiveKind,
        target: Option<&'a TargetContrast<T>>,
        base: Vec<f64>,
        n_max: usize,
    ) -> Self {
        // the scale is either irrelevant (sandwich kinds) or profiled in closed form
        let free = (0..structure.dim()).filter(|k| Some(*k) != structure.scale_index()).collect();
        Self { family, structure, kind, target, free, base, n_max, scoring: ScoringSettings::default() }
    }

    pub fn free_coords(&self, theta: &[f64]) -> Vec<f64> {
        self.free.iter().map(|k| theta[*k]).collect()
    }

    pub fn full_theta(&self, x: &[f64]) -> Vec<f64> {
        let mut t = self.base.clone();
        for (k, v) in self.free.iter().zip(x) {
            t[*k] = *v;
        }
        t
    }

    pub fn gamma(&self, x: &[f64]) -> DispersionParams<T> {
        let t = self.full_theta(x);
        let theta = UnconstrainedParams(DVector::from_iterator(t.len(), t.iter().map(|v| T::of(*v))));
        self.structure.unpack(&theta, self.n_max)
    }

    /// Objective at free coordinates `x`. Sandwich kinds refit beta from `beta`
    /// (updated in place); EQML and GEE evaluate at `beta` as given.
    pub fn eval(&self, view: &ClusterView<'_, T>, x: &[f64], beta: &mut DVector<T>) -> Result<f64> {
        let gamma = self.gamma(x);
        let v = match self.kind {
            ObjectiveKind::Sandwich | ObjectiveKind::SandwichLargeSample => {
                let target = self.target.expect("sandwich objective carries a target");
                let sol = fit_view(view, self.family, self.structure, &gamma, Some(beta), &self.scoring)?;
                let loss = if self.kind == ObjectiveKind::Sandwich {
                    loss_from_solution(&sol, target)?
                } else {
                    large_sample_from_solution(&sol, target)?
                };
                *beta = sol.beta;
                loss.value
            }
            ObjectiveKind::Eqml => eqml_profiled(view, self.family, self.structure, &gamma, beta)?.0,
            ObjectiveKind::Gee => gee_profiled(view, self.family, self.structure, &gamma, beta)?.0,
            ObjectiveKind::Unweighted => T::zero(),
        };
        let v = v.as_f64();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Optimizer(format!("objective not finite at {x:?}")))
        }
    }

    /// Constrained parameters at `x`, with a profiled scale filled in.
    pub fn final_gamma(&self, view: &ClusterView<'_, T>, x: &[f64], beta: &DVector<T>) -> Result<DispersionParams<T>> {
        let mut gamma = self.gamma(x);
        if let Some(k) = self.structure.scale_index() {
            let phi = match self.kind {
                ObjectiveKind::Eqml => eqml_profiled(view, self.family, self.structure, &gamma, beta)?.1,
                ObjectiveKind::Gee => gee_profiled(view, self.family, self.structure, &gamma, beta)?.1,
                _ => gamma.0[k],
            };
            gamma.0[k] = phi;
        }
        Ok(gamma)
    }
}

struct StartOutcome<T: Real> {
    nm: NelderMeadResult,
    beta: DVector<T>,
}

/// Runs Nelder-Mead from each start in parallel and keeps the best (earliest on ties).
fn multistart<T: Real>(
    profile: &Profile<'_, T>,
    view: &ClusterView<'_, T>,
    starts: &[Vec<f64>],
    beta0: &DVector<T>,
    nm: &NelderMeadSettings,
) -> Result<StartOutcome<T>> {
    let outcomes: Vec<StartOutcome<T>> = starts
        .par_iter()
        .map(|x0| {
            let mut warm = beta0.clone();
            let mut best_beta = beta0.clone();
            let mut best = f64::INFINITY;
            let res = nelder_mead::minimize(
                |x| {
                    let v = profile.eval(view, x, &mut warm).ok()?;
                    if v < best {
                        best = v;
                        best_beta = warm.clone();
                    }
                    Some(v)
                },
                x0,
                nm,
            );
            StartOutcome { nm: res, beta: best_beta }
        })
        .collect();
    let mut winner: Option<StartOutcome<T>> = None;
    for o in outcomes {
        if winner.as_ref().is_none_or(|w| o.nm.value < w.nm.value) {
            winner = Some(o);
        }
    }
    let w = winner.expect("at least one start");
    if !w.nm.value.is_finite() {
        return Err(Error::Optimizer(format!(
            "{} of {} starts produced no admissible evaluation",
            starts.len(),
            starts.len()
        )));
    }
    Ok(w)
}

fn central_gradient_norm<T: Real>(profile: &Profile<'_, T>, view: &ClusterView<'_, T>, x: &[f64], beta: &DVector<T>) -> f64 {
    let mut worst: f64 = 0.0;
    for k in 0..x.len() {
        let h = 1e-4 * (1.0 + x[k].abs());
        let mut xp = x.to_vec();
        xp[k] += h;
        let mut xm = x.to_vec();
        xm[k] -= h;
        let (mut bp, mut bm) = (beta.clone(), beta.clone());
        match (profile.eval(view, &xp, &mut bp), profile.eval(view, &xm, &mut bm)) {
            (Ok(fp), Ok(fm)) => worst = worst.max(((fp - fm) / (2.0 * h)).abs()),
            _ => return f64::NAN,
        }
    }
    worst
}

/// Fits `gamma` by minimizing `objective` over the structure's parameter space.
pub fn minimize_dispersion<T: Real>(
    dataset: &ClusterDataset<T>,
    family: &GlmFamily,
    structure: &CovarianceStructure,
    objective: &DispersionObjective<T>,
    settings: &OptimizerSettings,
) -> Result<SandregFit<T>> {
    minimize_dispersion_with(dataset, family, structure, objective, settings, &[])
}

/// As [`minimize_dispersion`], adding `warm_starts` (constrained points, e.g. the
/// estimate of a nested smaller model) to the start set.
pub fn minimize_dispersion_with<T: Real>(
    dataset: &ClusterDataset<T>,
    family: &GlmFamily,
    structure: &CovarianceStructure,
    objective: &DispersionObjective<T>,
    settings: &OptimizerSettings,
    warm_starts: &[DispersionParams<T>],
) -> Result<SandregFit<T>> {
    settings.validate()?;
    let kind = objective.kind();
    let view = dataset.view();
    let n_max = dataset.max_group_size();
    if let Some(c) = objective.target() {
        if c.len() != dataset.p() {
            return Err(Error::InvalidArgument(format!("target has length {}, expected {}", c.len(), dataset.p())));
        }
    }

    if kind == ObjectiveKind::Unweighted {
        let indep = CovarianceStructure::independence();
        let gamma = DispersionParams::empty();
        let solution = fit_view(&view, family, &indep, &gamma, None, &ScoringSettings::default())?;
        return Ok(SandregFit {
            beta: solution.beta.clone(),
            gamma,
            theta: UnconstrainedParams::zeros(0),
            structure: indep,
            kind,
            value: 0.0,
            trace: vec![],
            converged: true,
            evaluations: 0,
            rounds: 0,
            stationarity: 0.0,
            n_max,
            solution,
        });
    }

    structure.validate_for(dataset.p())?;
    let profile = Profile::new(family, structure, kind, objective.target(), vec![0.0; structure.dim()], n_max);
    if profile.free.len() > MAX_FREE_PARAMS {
        return Err(Error::InvalidStructure(format!(
            "{} has {} free dispersion parameters; at most {MAX_FREE_PARAMS} are supported",
            structure.label(),
            profile.free.len()
        )));
    }

    let mut starts = vec![vec![0.0; profile.free.len()]];
    for g in warm_starts {
        let theta = structure.pack(g, n_max)?;
        let full: Vec<f64> = theta.as_slice().iter().map(|v| v.as_f64()).collect();
        starts.push(profile.free_coords(&full));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let normal = Normal::new(0.0, settings.init_scale).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    for _ in 1..settings.restarts {
        starts.push(starts[0].iter().map(|v| v + normal.sample(&mut rng)).collect());
    }
    let nm = settings.nelder_mead();

    let pilot = glm_start(&view, family)?;
    let (x, beta_at_x, value, trace, mut converged, evaluations, rounds) = if kind.is_sandwich() {
        let w = multistart(&profile, &view, &starts, &pilot, &nm)?;
        (w.nm.x, w.beta, w.nm.value, w.nm.trace, w.nm.converged, w.nm.evaluations, 1)
    } else {
        // alternate: gamma at fixed beta, then beta at the new gamma
        let mut beta = pilot;
        let mut x = starts[0].clone();
        let mut prev: Option<DispersionParams<T>> = None;
        let mut evaluations = 0;
        let mut rounds = 0;
        let mut out = None;
        let mut settled = false;
        for round in 0..settings.max_rounds {
            rounds += 1;
            let round_starts = if round == 0 { starts.clone() } else { vec![x.clone()] };
            let w = multistart(&profile, &view, &round_starts, &beta, &nm)?;
            evaluations += w.nm.evaluations;
            x = w.nm.x.clone();
            let gamma = profile.final_gamma(&view, &x, &beta)?;
            let sol = fit_view(&view, family, structure, &gamma, Some(&beta), &ScoringSettings::default())?;
            beta = sol.beta;
            let moved = prev.as_ref().map_or(f64::INFINITY, |p| (&p.0 - &gamma.0).amax().as_f64());
            prev = Some(gamma);
            out = Some((w.nm.value, w.nm.trace, w.nm.converged));
            if moved <= settings.gamma_tol {
                settled = true;
                break;
            }
        }
        let (value, trace, conv) = out.expect("at least one round");
        (x, beta, value, trace, conv && settled, evaluations, rounds)
    };

    let gamma = profile.final_gamma(&view, &x, &beta_at_x)?;
    let solution = fit_view(&view, family, structure, &gamma, Some(&beta_at_x), &ScoringSettings::default())?;
    let stationarity = central_gradient_norm(&profile, &view, &x, &beta_at_x);
    let theta = structure.pack(&gamma, n_max)?;
    if kind.is_sandwich() {
        converged &= solution.score_norm.as_f64().is_finite();
    }
    Ok(SandregFit {
        beta: solution.beta.clone(),
        gamma,
        theta,
        structure: structure.clone(),
        kind,
        value,
        trace,
        converged,
        evaluations,
        rounds,
        stationarity,
        n_max,
        solution,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glm::ClusterData;
    use crate::sandwich::sandwich_loss;
    use crate::working_cov::{build_correlation, ScaleMode};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    /// Random-intercept linear data `y = x + u + e`, `Var(u) = v`, `Var(e) = s`.
    fn cs_data(rng: &mut ChaCha8Rng, clusters: usize, n: usize, v: f64, s: f64, hetero: f64) -> ClusterDataset<f64> {
        let cs = (0..clusters)
            .map(|_| {
                let u = v.sqrt() * rng.sample::<f64, _>(StandardNormal);
                let xs: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                let y: Vec<f64> = xs
                    .iter()
                    .map(|x| {
                        let sd = s.sqrt() * (1.0 + hetero * (-2.0 * x * x).exp());
                        x + u + sd * rng.sample::<f64, _>(StandardNormal)
                    })
                    .collect();
                let rows: Vec<Vec<f64>> = xs.iter().map(|x| vec![*x]).collect();
                ClusterData::from_rows(&y, &rows).unwrap()
            })
            .collect();
        ClusterDataset::new(cs).unwrap()
    }

    fn quick() -> OptimizerSettings {
        OptimizerSettings { restarts: 2, ..Default::default() }
    }

    #[test]
    fn eqml_ungrouped_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ds = cs_data(&mut rng, 40, 1, 0.0, 2.0, 0.0);
        let fam = GlmFamily::gaussian();
        let s = CovarianceStructure::independence_free();
        let fit = minimize_dispersion(&ds, &fam, &s, &DispersionObjective::eqml(), &quick()).unwrap();
        let rss: f64 = ds.clusters().iter().map(|c| (c.y() - c.x() * &fit.beta).norm_squared()).sum();
        assert_relative_eq!(fit.gamma.0[0], rss / 40.0, max_relative = 1e-10);
        let n = 40.0;
        let obj = eqml_objective(&ds, &fam, &s, &fit.gamma, &fit.beta).unwrap();
        assert_relative_eq!(obj, n * (rss / n).ln() + n, max_relative = 1e-10);
    }

    #[test]
    fn gee_ungrouped_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ds = cs_data(&mut rng, 30, 1, 0.0, 1.5, 0.0);
        let fam = GlmFamily::gaussian();
        let s = CovarianceStructure::independence_free();
        let fit = minimize_dispersion(&ds, &fam, &s, &DispersionObjective::gee(), &quick()).unwrap();
        let mean_r2: f64 = ds.clusters().iter().map(|c| (c.y() - c.x() * &fit.beta).norm_squared()).sum::<f64>() / 30.0;
        assert_relative_eq!(fit.gamma.0[0], mean_r2, max_relative = 1e-10);
    }

    #[test]
    fn eqml_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ds = cs_data(&mut rng, 7, 4, 0.5, 1.0, 0.0);
        let fam = GlmFamily::gaussian();
        let s = CovarianceStructure::exchangeable(ScaleMode::Free);
        let g = DispersionParams::from_slice(&[0.3, 1.7]);
        let beta = DVector::from_vec(vec![0.8]);
        let got = eqml_objective(&ds, &fam, &s, &g, &beta).unwrap();
        let mut expect = 0.0;
        for c in ds.clusters() {
            let sigma = build_correlation(&s, &g, c.len()).unwrap();
            let r = c.y() - c.x() * &beta;
            expect += sigma.determinant().ln() + (r.transpose() * sigma.try_inverse().unwrap() * &r)[(0, 0)];
        }
        assert_relative_eq!(got, expect, max_relative = 1e-10);
    }

    #[test]
    fn gee_matches_naive_binomial() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cs = (0..6)
            .map(|_| {
                let rows: Vec<Vec<f64>> = (0..3).map(|_| vec![1.0, rng.sample(StandardNormal)]).collect();
                let y: Vec<f64> = (0..3).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
                ClusterData::from_rows(&y, &rows).unwrap()
            })
            .collect();
        let ds = ClusterDataset::new(cs).unwrap();
        let fam = GlmFamily::binomial();
        let s = CovarianceStructure::ar1(ScaleMode::Unit);
        let g = DispersionParams::from_slice(&[0.35]);
        let beta = DVector::from_vec(vec![0.2, -0.4]);
        let got = gee_objective(&ds, &fam, &s, &g, &beta).unwrap();
        let mut expect = 0.0;
        for c in ds.clusters() {
            let p = build_correlation(&s, &g, 3).unwrap();
            for j in 0..3 {
                for k in 0..3 {
                    let mj = 1.0 / (1.0 + (-(c.x().row(j) * &beta)[(0, 0)]).exp());
                    let mk = 1.0 / (1.0 + (-(c.x().row(k) * &beta)[(0, 0)]).exp());
                    let e = (c.y()[j] - mj) * (c.y()[k] - mk) / (mj * (1.0 - mj) * mk * (1.0 - mk)).sqrt();
                    expect += (e - p[(j, k)]).powi(2);
                }
            }
        }
        assert_relative_eq!(got, expect, max_relative = 1e-10);
    }

    #[test]
    fn gee_exchangeable_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ds = cs_data(&mut rng, 50, 4, 0.6, 1.0, 0.0);
        let fam = GlmFamily::gaussian();
        let s = CovarianceStructure::exchangeable(ScaleMode::Free);
        let settings = OptimizerSettings { tol: 1e-12, restarts: 3, ..Default::default() };
        let fit = minimize_dispersion(&ds, &fam, &s, &DispersionObjective::gee(), &settings).unwrap();
        // closed form at the final beta's pilot: recompute at the fitted beta
        let beta = &fit.beta;
        let (mut diag, mut off, mut nd, mut no) = (0.0, 0.0, 0.0, 0.0);
        for c in ds.clusters() {
            let r = c.y() - c.x() * beta;
            for j in 0..4 {
                for k in 0..4 {
                    if j == k {
                        diag += r[j] * r[k];
                        nd += 1.0;
                    } else {
                        off += r[j] * r[k];
                        no += 1.0;
                    }
                }
            }
        }
        let phi = diag / nd;
        let rho = off / no / phi;
        assert!((fit.gamma.0[0] - rho).abs() < 1e-4, "{} vs {rho}", fit.gamma.0[0]);
        assert!((fit.gamma.0[1] - phi).abs() < 1e-4 * phi);
    }

    #[test]
    fn unweighted_is_pooled_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ds = cs_data(&mut rng, 20, 3, 0.5, 1.0, 0.0);
        let fit = minimize_dispersion(&ds, &GlmFamily::gaussian(), &CovarianceStructure::ar1(ScaleMode::Free), &DispersionObjective::unweighted(), &quick()).unwrap();
        let (mut xtx, mut xty) = (0.0, 0.0);
        for c in ds.clusters() {
            xtx += c.x().norm_squared();
            xty += c.x().column(0).dot(c.y());
        }
        assert_relative_eq!(fit.beta[0], xty / xtx, max_relative = 1e-12);
        assert_eq!(fit.structure, CovarianceStructure::independence());
    }

    #[test]
    fn sandwich_beats_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ds = cs_data(&mut rng, 40, 4, 0.5, 1.0, 3.0);
        let fam = GlmFamily::gaussian();
        let s = CovarianceStructure::ar1(ScaleMode::Unit);
        let c = TargetContrast::coordinate(1, 0).unwrap();
        let fit = minimize_dispersion(&ds, &fam, &s, &DispersionObjective::sandwich(c.clone()), &OptimizerSettings::default()).unwrap();
        let grid_min = (0..200)
            .map(|k| {
                let theta = -6.0 + 12.0 * k as f64 / 199.0;
                let g = s.unpack(&UnconstrainedParams(DVector::from_element(1, theta)), 4);
                sandwich_loss(&ds, &fam, &s, &g, &c).unwrap().value
            })
            .fold(f64::INFINITY, f64::min);
        assert!(fit.value <= grid_min + 1e-4, "{} vs {grid_min}", fit.value);
        let again = sandwich_loss(&ds, &fam, &s, &fit.gamma, &c).unwrap().value;
        assert_relative_eq!(again, fit.value, max_relative = 1e-8);
    }

    #[test]
    fn sandwich_dominates_on_own_criterion() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ds = cs_data(&mut rng, 30, 4, 0.5, 1.0, 3.0);
        let fam = GlmFamily::gaussian();
        let s = CovarianceStructure::exchangeable(ScaleMode::Free);
        let c = TargetContrast::coordinate(1, 0).unwrap();
        let sw = minimize_dispersion(&ds, &fam, &s, &DispersionObjective::sandwich(c.clone()), &OptimizerSettings::default()).unwrap();
        for obj in [DispersionObjective::eqml(), DispersionObjective::gee()] {
            let other = minimize_dispersion(&ds, &fam, &s, &obj, &quick()).unwrap();
            let l = sandwich_loss(&ds, &fam, &s, &other.gamma, &c).unwrap().value;
            assert!(sw.value <= l + 1e-8);
        }
    }

    #[test]
    fn deterministic_and_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ds = cs_data(&mut rng, 25, 3, 0.5, 1.0, 1.0);
        let fam = GlmFamily::gaussian();
        let s = CovarianceStructure::exchangeable(ScaleMode::Free);
        let obj = DispersionObjective::sandwich(TargetContrast::coordinate(1, 0).unwrap());
        let a = minimize_dispersion(&ds, &fam, &s, &obj, &OptimizerSettings::default()).unwrap();
        let b = minimize_dispersion(&ds, &fam, &s, &obj, &OptimizerSettings::default()).unwrap();
        assert_eq!(a.gamma, b.gamma);
        let back = s.unpack(&s.pack(&a.gamma, a.n_max).unwrap(), a.n_max);
        assert!((back.0 - &a.gamma.0).amax() <= 1e-10);
        assert!(a.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn eqml_recovers_compound_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (v, s2) = (0.5, 1.0);
        let ds = cs_data(&mut rng, 2000, 4, v, s2, 0.0);
        let s = CovarianceStructure::exchangeable(ScaleMode::Free);
        let fit = minimize_dispersion(&ds, &GlmFamily::gaussian(), &s, &DispersionObjective::eqml(), &quick()).unwrap();
        let rho = v / (v + s2);
        assert!((fit.gamma.0[0] - rho).abs() < 0.1 * rho);
        assert!((fit.gamma.0[1] - (v + s2)).abs() < 0.1 * (v + s2));
    }

    #[test]
    fn objective_target_invariant() {
        assert!(DispersionObjective::<f64>::new(ObjectiveKind::Sandwich, None).is_err());
        assert!(DispersionObjective::new(ObjectiveKind::Eqml, Some(TargetContrast::<f64>::coordinate(1, 0).unwrap())).is_err());
        assert_eq!("gee".parse::<ObjectiveKind>().unwrap(), ObjectiveKind::Gee);
    }
}
