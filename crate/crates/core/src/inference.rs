//! Jackknife variance of `beta_hat` accounting for dispersion re-estimation, model
//! selection by estimated variance, and delta-method variances.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::dispersion::{minimize_dispersion_with, DispersionObjective, ObjectiveKind, OptimizerSettings, Profile, SandregFit};
use crate::error::{Error, Result};
use crate::glm::{ClusterDataset, ClusterView, GlmFamily, TargetContrast};
use crate::linalg;
use crate::sandwich::woodbury_t;
use crate::scalar::Real;
use crate::working_cov::{cluster_weights, CovarianceStructure, DispersionParams};

/// Relative eigenvalue floor applied to finite-difference Hessians.
pub const HESSIAN_FLOOR: f64 = 1e-8;

/// Step halvings tried before a dispersion Newton step is abandoned.
pub const MAX_STEP_HALVINGS: usize = 30;

#[derive(Clone, Debug)]
pub struct VarianceEstimate<T: Real> {
    /// `(I-1)/I sum_i delta_i delta_i'`.
    pub vhat: DMatrix<T>,
    /// `beta_hat_(-i) - beta_hat` per cluster.
    pub deltas: Vec<DVector<T>>,
    /// Leave-one-out move of the optimized unconstrained dispersion coordinates.
    pub gamma_deltas: Vec<Vec<f64>>,
    /// Newton steps taken per cluster.
    pub newton_steps_used: usize,
    /// Clusters whose dispersion step was abandoned (dispersion held fixed).
    pub fallbacks: usize,
    /// Clusters whose Hessian needed eigenvalue flooring.
    pub floored: usize,
}

impl<T: Real> VarianceEstimate<T> {
    /// `c' V c`.
    pub fn variance(&self, c: &TargetContrast<T>) -> T {
        linalg::quad_form(&self.vhat, c.vector())
    }

    pub fn standard_errors(&self) -> Vec<T> {
        self.vhat.diagonal().iter().map(|v| v.max(T::zero()).sqrt()).collect()
    }
}

fn fd_step(x: f64) -> f64 {
    1e-4 * (1.0 + x.abs())
}

/// Central-difference gradient and Hessian of the profiled objective over `view`,
/// with the objective at `x` (zero when the Hessian is not requested).
fn grad_hess<T: Real>(
    profile: &Profile<'_, T>,
    view: &ClusterView<'_, T>,
    x: &[f64],
    beta: &DVector<T>,
    with_hessian: bool,
) -> Result<(DVector<f64>, DMatrix<f64>, f64)> {
    let q = x.len();
    let f = |pt: &[f64]| -> Result<f64> {
        let mut b = beta.clone();
        profile.eval(view, pt, &mut b)
    };
    let h: Vec<f64> = x.iter().map(|v| fd_step(*v)).collect();
    let shifted = |moves: &[(usize, f64)]| {
        let mut p = x.to_vec();
        for (k, s) in moves {
            p[*k] += s * h[*k];
        }
        p
    };
    let f0 = if with_hessian { f(x)? } else { 0.0 };
    let mut g = DVector::zeros(q);
    let mut hess = DMatrix::zeros(q, q);
    for j in 0..q {
        let fp = f(&shifted(&[(j, 1.0)]))?;
        let fm = f(&shifted(&[(j, -1.0)]))?;
        g[j] = (fp - fm) / (2.0 * h[j]);
        if with_hessian {
            hess[(j, j)] = (fp - 2.0 * f0 + fm) / (h[j] * h[j]);
        }
    }
    if with_hessian {
        for j in 0..q {
            for k in (j + 1)..q {
                let fpp = f(&shifted(&[(j, 1.0), (k, 1.0)]))?;
                let fpm = f(&shifted(&[(j, 1.0), (k, -1.0)]))?;
                let fmp = f(&shifted(&[(j, -1.0), (k, 1.0)]))?;
                let fmm = f(&shifted(&[(j, -1.0), (k, -1.0)]))?;
                let v = (fpp - fpm - fmp + fmm) / (4.0 * h[j] * h[k]);
                hess[(j, k)] = v;
                hess[(k, j)] = v;
            }
        }
    }
    Ok((g, hess, f0))
}

struct ClusterOutcome<T: Real> {
    delta: DVector<T>,
    gamma_delta: Vec<f64>,
    fallback: bool,
    floored: bool,
}

/// Jackknife estimate of `Var(beta_hat)` for a fitted model.
///
/// For every cluster the deleted-cluster estimate is approximated by one Woodbury
/// step for `beta` at fixed dispersion, `steps` Newton steps on the leave-one-out
/// dispersion objective (derivatives by central differences in the optimizer's
/// unconstrained coordinates) and a first-order correction for the change of weights.
/// The Newton step descends the leave-one-out objective:
/// `x <- x - H_(-i)^{-1} (g_(-i) - g)`, where subtracting the full-sample gradient `g`
/// absorbs optimizer tolerance at the full-sample minimizer. Negative curvature is
/// replaced by its magnitude (floored relative to the largest eigenvalue) and the step
/// is halved until the leave-one-out objective does not increase; a step with no
/// such point ends the iteration.
///
/// `steps = 0` holds the dispersion fixed.
pub fn jackknife_variance<T: Real>(
    fit: &SandregFit<T>,
    dataset: &ClusterDataset<T>,
    family: &GlmFamily,
    objective: &DispersionObjective<T>,
    steps: usize,
) -> Result<VarianceEstimate<T>> {
    if objective.kind() != fit.kind {
        return Err(Error::InvalidArgument(format!(
            "fit used objective {}, jackknife asked for {}",
            fit.kind,
            objective.kind()
        )));
    }
    let big_i = dataset.num_clusters();
    let p = dataset.p();
    if big_i < p + 2 {
        return Err(Error::TooFewClusters { have: big_i, need: p + 2 });
    }
    let sol = &fit.solution;
    if sol.num_clusters() != big_i {
        return Err(Error::InvalidArgument("fit does not belong to this dataset".into()));
    }

    let base: Vec<f64> = fit.theta.as_slice().iter().map(|v| v.as_f64()).collect();
    let mut profile = Profile::new(family, &fit.structure, fit.kind, objective.target(), base.clone(), fit.n_max);
    // finite differences of the loss need beta far below the default tolerance
    profile.scoring.tol = 1e-13;
    let x_hat = profile.free_coords(&base);
    let use_gamma = steps > 0 && fit.kind != ObjectiveKind::Unweighted && !x_hat.is_empty();
    let full_view = dataset.view();
    let full_grad = if use_gamma {
        grad_hess(&profile, &full_view, &x_hat, &fit.beta, false)?.0
    } else {
        DVector::zeros(x_hat.len())
    };

    let outcomes = sol
        .terms
        .par_iter()
        .map(|ct| -> Result<ClusterOutcome<T>> {
            let i = ct.index;
            let (_, t) = woodbury_t(&sol.info_inv, ct)?;
            let check = -(&t * &ct.dtwr);
            let fixed = ClusterOutcome { delta: check.clone(), gamma_delta: vec![0.0; x_hat.len()], fallback: false, floored: false };
            if !use_gamma {
                return Ok(fixed);
            }
            let view = dataset.leave_out(i);
            let beta_check = &fit.beta + &check;
            let mut x = x_hat.clone();
            let mut floored = false;
            for _ in 0..steps {
                let step = grad_hess(&profile, &view, &x, &beta_check, true).ok().and_then(|(g, h, f0)| {
                    let (h_inv, fl) = linalg::floored_inverse(&h, HESSIAN_FLOOR)?;
                    floored |= fl;
                    let s = h_inv * (g - &full_grad);
                    s.iter().all(|v| v.is_finite()).then_some((s, f0))
                });
                let Some((s, f0)) = step else {
                    log::warn!("cluster {i}: dispersion Newton step failed, holding dispersion fixed");
                    return Ok(ClusterOutcome { fallback: true, ..fixed });
                };
                // halve until the leave-one-out objective does not increase
                let mut scale = 1.0;
                let mut accepted = None;
                for _ in 0..=MAX_STEP_HALVINGS {
                    let trial: Vec<f64> = x.iter().zip(s.iter()).map(|(xk, sk)| xk - scale * sk).collect();
                    let mut b = beta_check.clone();
                    if matches!(profile.eval(&view, &trial, &mut b), Ok(v) if v <= f0) {
                        accepted = Some(trial);
                        break;
                    }
                    scale *= 0.5;
                }
                match accepted {
                    Some(trial) => x = trial,
                    None => break,
                }
            }
            let gamma_i = profile.gamma(&x);
            match weight_correction(dataset, family, fit, &gamma_i, i, &t, &check) {
                Ok(delta) => Ok(ClusterOutcome {
                    delta,
                    gamma_delta: x.iter().zip(&x_hat).map(|(a, b)| a - b).collect(),
                    fallback: false,
                    floored,
                }),
                Err(e) => {
                    log::warn!("cluster {i}: leave-one-out weights failed ({e}), holding dispersion fixed");
                    Ok(ClusterOutcome { fallback: true, ..fixed })
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let mut vhat = DMatrix::zeros(p, p);
    for o in &outcomes {
        vhat += &o.delta * o.delta.transpose();
    }
    vhat *= T::of((big_i - 1) as f64 / big_i as f64);
    linalg::symmetrize(&mut vhat);
    check_psd(&vhat)?;
    Ok(VarianceEstimate {
        vhat,
        newton_steps_used: if use_gamma { steps } else { 0 },
        fallbacks: outcomes.iter().filter(|o| o.fallback).count(),
        floored: outcomes.iter().filter(|o| o.floored).count(),
        gamma_deltas: outcomes.iter().map(|o| o.gamma_delta.clone()).collect(),
        deltas: outcomes.into_iter().map(|o| o.delta).collect(),
    })
}

/// `(I - T_i D'Delta D)(beta_check - beta_hat) + T_i D'Delta R` over clusters `j != i`.
fn weight_correction<T: Real>(
    dataset: &ClusterDataset<T>,
    family: &GlmFamily,
    fit: &SandregFit<T>,
    gamma_i: &DispersionParams<T>,
    i: usize,
    t: &DMatrix<T>,
    check: &DVector<T>,
) -> Result<DVector<T>> {
    let p = check.len();
    let mut dd = DMatrix::zeros(p, p);
    let mut dr = DVector::zeros(p);
    for ct in fit.solution.terms.iter().filter(|c| c.index != i) {
        let w_new = cluster_weights(dataset.cluster(ct.index), ct.index, family, &fit.beta, &fit.structure, gamma_i)?.w;
        let dtdelta = ct.d.transpose() * (w_new - &ct.w);
        dd += &dtdelta * &ct.d;
        dr += &dtdelta * &ct.resid;
    }
    Ok((DMatrix::identity(p, p) - t * dd) * check + t * dr)
}

fn check_psd<T: Real>(v: &DMatrix<T>) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NotPsd);
    }
    let eig = SymmetricEigen::new(v.clone());
    let scale = v.trace().abs().max(T::of(1e-300));
    if eig.eigenvalues.iter().any(|e| *e < -T::of(1e-10) * scale) {
        return Err(Error::NotPsd);
    }
    Ok(())
}

/// A working-covariance model to compare.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCandidate<T: Real> {
    pub label: String,
    pub structure: CovarianceStructure,
    pub warm_start: Option<DispersionParams<T>>,
}

impl<T: Real> ModelCandidate<T> {
    pub fn new(label: impl Into<String>, structure: CovarianceStructure) -> Self {
        Self { label: label.into(), structure, warm_start: None }
    }
}

#[derive(Clone, Debug)]
pub struct SelectionRow<T: Real> {
    pub label: String,
    pub gamma: Option<DispersionParams<T>>,
    /// `c' V_hat c`; conditional on the model, not on the selection.
    pub variance: Option<T>,
    pub error: Option<String>,
    pub selected: bool,
}

#[derive(Clone, Debug)]
pub struct Selection<T: Real> {
    pub selected: String,
    pub rows: Vec<SelectionRow<T>>,
    pub fits: Vec<Option<SandregFit<T>>>,
}

/// Fits every candidate, estimates `c' V_hat c` by the jackknife and returns the
/// minimizer. Ties go to the earlier candidate. Failed candidates are recorded and skipped.
#[allow(clippy::too_many_arguments)]
pub fn select_model<T: Real>(
    candidates: &[ModelCandidate<T>],
    dataset: &ClusterDataset<T>,
    family: &GlmFamily,
    kind: ObjectiveKind,
    c: &TargetContrast<T>,
    settings: &OptimizerSettings,
    steps: usize,
) -> Result<Selection<T>> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no candidate models".into()));
    }
    for (k, a) in candidates.iter().enumerate() {
        if candidates[..k].iter().any(|b| b.label == a.label) {
            return Err(Error::InvalidArgument(format!("duplicate candidate label `{}`", a.label)));
        }
    }
    let objective = DispersionObjective::new(kind, kind.is_sandwich().then(|| c.clone()))?;
    let mut rows: Vec<SelectionRow<T>> = Vec::with_capacity(candidates.len());
    let mut fits: Vec<Option<SandregFit<T>>> = Vec::with_capacity(candidates.len());
    for cand in candidates {
        let mut warm: Vec<DispersionParams<T>> = cand.warm_start.iter().cloned().collect();
        for prev in fits.iter().flatten() {
            if prev.structure == cand.structure {
                continue;
            }
            if let Some(g) = cand.structure.embed(&prev.structure, &prev.gamma) {
                warm.push(g);
            }
        }
        let outcome = minimize_dispersion_with(dataset, family, &cand.structure, &objective, settings, &warm)
            .and_then(|fit| jackknife_variance(&fit, dataset, family, &objective, steps).map(|v| (fit, v)));
        match outcome {
            Ok((fit, v)) => {
                rows.push(SelectionRow {
                    label: cand.label.clone(),
                    gamma: Some(fit.gamma.clone()),
                    variance: Some(v.variance(c)),
                    error: None,
                    selected: false,
                });
                fits.push(Some(fit));
            }
            Err(e) => {
                log::warn!("candidate {} failed: {e}", cand.label);
                rows.push(SelectionRow { label: cand.label.clone(), gamma: None, variance: None, error: Some(e.to_string()), selected: false });
                fits.push(None);
            }
        }
    }
    let mut best: Option<(usize, T)> = None;
    for (k, r) in rows.iter().enumerate() {
        if let Some(v) = r.variance {
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((k, v));
            }
        }
    }
    let Some((k, _)) = best else {
        let msgs: Vec<String> = rows.iter().map(|r| format!("{}: {}", r.label, r.error.as_deref().unwrap_or("?"))).collect();
        return Err(Error::Optimizer(format!("every candidate failed ({})", msgs.join("; "))));
    };
    rows[k].selected = true;
    Ok(Selection { selected: rows[k].label.clone(), rows, fits })
}

/// Delta-method variance of `g^{-1}(c' beta_hat)`: `[dmu/deta]^2 c' V c`.
pub fn delta_method_variance<T: Real>(beta: &DVector<T>, vhat: &DMatrix<T>, c: &TargetContrast<T>, family: &GlmFamily) -> T {
    let eta = c.vector().dot(beta);
    let d = family.link.mu_eta(eta);
    d * d * linalg::quad_form(vhat, c.vector())
}
