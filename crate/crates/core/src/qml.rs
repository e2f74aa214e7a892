//! Solving the quasi-likelihood estimating equation for `beta` at a fixed dispersion.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::glm::{mean_jacobian, mean_vector, ClusterData, ClusterDataset, ClusterView, GlmFamily, Link};
use crate::linalg;
use crate::scalar::Real;
use crate::working_cov::{cluster_weights, CovarianceStructure, DispersionParams};

/// Per-cluster quantities at `(beta, gamma)`.
#[derive(Clone, Debug)]
pub struct ClusterTerms<T: Real> {
    /// Index of the cluster in the full dataset.
    pub index: usize,
    /// `D_i`, `n_i x p`.
    pub d: DMatrix<T>,
    /// `W_i`.
    pub w: DMatrix<T>,
    /// `Sigma_i = W_i^{-1}`.
    pub sigma: DMatrix<T>,
    /// `log det Sigma_i`.
    pub log_det: T,
    /// `R_i = Y_i - mu_i(beta)`.
    pub resid: DVector<T>,
    /// `D_i' W_i D_i`.
    pub dtwd: DMatrix<T>,
    /// `D_i' W_i R_i`.
    pub dtwr: DVector<T>,
}

pub fn cluster_terms<T: Real>(
    cluster: &ClusterData<T>,
    index: usize,
    family: &GlmFamily,
    beta: &DVector<T>,
    structure: &CovarianceStructure,
    gamma: &DispersionParams<T>,
) -> Result<ClusterTerms<T>> {
    let cw = cluster_weights(cluster, index, family, beta, structure, gamma)?;
    let d = mean_jacobian(cluster, family, beta);
    let resid = cluster.y() - mean_vector(cluster, family, beta);
    let dtw = d.transpose() * &cw.w;
    let dtwd = &dtw * &d;
    let dtwr = &dtw * &resid;
    Ok(ClusterTerms { index, d, w: cw.w, sigma: cw.sigma, log_det: cw.log_det, resid, dtwd, dtwr })
}

/// Per-cluster terms for every cluster of the view plus their ordered sums
/// `sum D'WD` and `sum D'WR`.
///
/// Clusters are evaluated in parallel and reduced sequentially in cluster order, so
/// results do not depend on the thread count.
pub(crate) fn accumulate<T: Real>(
    view: &ClusterView<'_, T>,
    family: &GlmFamily,
    beta: &DVector<T>,
    structure: &CovarianceStructure,
    gamma: &DispersionParams<T>,
) -> Result<(Vec<ClusterTerms<T>>, DMatrix<T>, DVector<T>)> {
    let items: Vec<(usize, &ClusterData<T>)> = view.iter().collect();
    let terms = items
        .par_iter()
        .map(|(i, c)| cluster_terms(c, *i, family, beta, structure, gamma))
        .collect::<Result<Vec<_>>>()?;
    let p = view.p();
    let mut info = DMatrix::zeros(p, p);
    let mut score = DVector::zeros(p);
    for t in &terms {
        info += &t.dtwd;
        score += &t.dtwr;
    }
    linalg::symmetrize(&mut info);
    Ok((terms, info, score))
}

/// `sum_i D_i' W_i (Y_i - mu_i(beta))`.
pub fn estimating_equation<T: Real>(
    dataset: &ClusterDataset<T>,
    family: &GlmFamily,
    structure: &CovarianceStructure,
    gamma: &DispersionParams<T>,
    beta: &DVector<T>,
) -> Result<DVector<T>> {
    accumulate(&dataset.view(), family, beta, structure, gamma).map(|(_, _, s)| s)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoringSettings {
    pub max_iter: usize,
    /// Relative score tolerance: stop when `||score||_inf <= tol * (1 + ||beta||_inf)`.
    pub tol: f64,
    pub max_halvings: usize,
}

impl Default for ScoringSettings {
    fn default() -> Self {
        Self { max_iter: 100, tol: 1e-8, max_halvings: 20 }
    }
}

/// Solution of the estimating equation together with the caches the sandwich loss needs.
#[derive(Clone, Debug)]
pub struct QmlSolution<T: Real> {
    pub beta: DVector<T>,
    /// `||sum_i D_i'W_iR_i||_inf` at `beta`.
    pub score_norm: T,
    pub iterations: usize,
    /// Per-cluster terms in cluster order.
    pub terms: Vec<ClusterTerms<T>>,
    /// `D'WD = sum_i D_i'W_iD_i`.
    pub info: DMatrix<T>,
    /// `(D'WD)^{-1}`.
    pub info_inv: DMatrix<T>,
    /// Binomial fits only: linear predictors beyond |30| on a growing share of rows.
    pub separation_warning: bool,
}

impl<T: Real> QmlSolution<T> {
    pub fn num_clusters(&self) -> usize {
        self.terms.len()
    }

    pub fn score(&self) -> DVector<T> {
        self.terms.iter().fold(DVector::zeros(self.beta.len()), |acc, t| acc + &t.dtwr)
    }
}

fn rank_error<T: Real>(info: &DMatrix<T>) -> Error {
    Error::RankDeficient { condition: linalg::condition_number(info) }
}

fn max_condition<T: Real>() -> f64 {
    0.01 / T::epsilon().as_f64()
}

fn finish<T: Real>(
    beta: DVector<T>,
    terms: Vec<ClusterTerms<T>>,
    info: DMatrix<T>,
    score: &DVector<T>,
    iterations: usize,
    separation_warning: bool,
) -> Result<QmlSolution<T>> {
    let info_inv = linalg::spd_inverse(&info).ok_or_else(|| rank_error(&info))?;
    Ok(QmlSolution {
        beta,
        score_norm: linalg::inf_norm(score),
        iterations,
        terms,
        info,
        info_inv,
        separation_warning,
    })
}

fn extreme_share<T: Real>(view: &ClusterView<'_, T>, beta: &DVector<T>) -> f64 {
    let mut big = 0usize;
    let mut total = 0usize;
    for (_, c) in view.iter() {
        let eta = c.x() * beta;
        big += eta.iter().filter(|e| e.abs() > T::of(30.0)).count();
        total += eta.len();
    }
    big as f64 / total.max(1) as f64
}

/// Pooled GLM fit under independence from `beta = 0`; the default starting point.
pub fn glm_start<T: Real>(view: &ClusterView<'_, T>, family: &GlmFamily) -> Result<DVector<T>> {
    let zero = DVector::zeros(view.p());
    let indep = CovarianceStructure::independence();
    fisher_scoring_view(view, family, &indep, &DispersionParams::empty(), Some(&zero), &ScoringSettings::default())
        .map(|s| s.beta)
}

/// Fisher scoring `beta <- beta + (sum D'WD)^{-1} sum D'WR` with step halving.
pub fn fisher_scoring<T: Real>(
    dataset: &ClusterDataset<T>,
    family: &GlmFamily,
    structure: &CovarianceStructure,
    gamma: &DispersionParams<T>,
    beta_init: Option<&DVector<T>>,
) -> Result<QmlSolution<T>> {
    fisher_scoring_view(&dataset.view(), family, structure, gamma, beta_init, &ScoringSettings::default())
}

pub fn fisher_scoring_view<T: Real>(
    view: &ClusterView<'_, T>,
    family: &GlmFamily,
    structure: &CovarianceStructure,
    gamma: &DispersionParams<T>,
    beta_init: Option<&DVector<T>>,
    settings: &ScoringSettings,
) -> Result<QmlSolution<T>> {
    let mut beta = match beta_init {
        Some(b) => {
            if b.len() != view.p() || b.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument("starting beta must be finite with length p".into()));
            }
            b.clone()
        }
        None => glm_start(view, family)?,
    };
    let tol = T::of(settings.tol);
    let threshold = |b: &DVector<T>| tol * (T::one() + linalg::inf_norm(b));
    let watch_separation = family.link == Link::Logit;
    let mut share = if watch_separation { extreme_share(view, &beta) } else { 0.0 };
    let mut separation = false;

    let (mut terms, mut info, mut score) = accumulate(view, family, &beta, structure, gamma)?;
    let mut norm = linalg::inf_norm(&score);
    let mut iterations = 0;
    loop {
        if norm <= threshold(&beta) {
            return finish(beta, terms, info, &score, iterations, separation);
        }
        if iterations >= settings.max_iter {
            break;
        }
        let chol = linalg::cholesky(&info).ok_or_else(|| rank_error(&info))?;
        let step = chol.solve(&score);
        // a full step already at rounding level: the score cannot get smaller
        if linalg::inf_norm(&step) <= T::of(1e-12) * (T::one() + linalg::inf_norm(&beta)) {
            return finish(beta, terms, info, &score, iterations, separation);
        }
        let mut scale = T::one();
        let mut accepted = None;
        for _ in 0..=settings.max_halvings {
            let cand = &beta + &step * scale;
            match accumulate(view, family, &cand, structure, gamma) {
                Ok((t, i, s)) => {
                    let n = linalg::inf_norm(&s);
                    if n.is_finite() && (n < norm || n <= threshold(&cand)) {
                        accepted = Some((cand, t, i, s, n));
                        break;
                    }
                }
                Err(Error::DegenerateMean { .. }) => {}
                Err(e) => return Err(e),
            }
            scale *= T::half();
        }
        let Some((b, t, i, s, n)) = accepted else {
            break;
        };
        beta = b;
        terms = t;
        info = i;
        score = s;
        norm = n;
        iterations += 1;
        if watch_separation {
            let now = extreme_share(view, &beta);
            if now > 0.0 && now > share {
                separation = true;
            }
            share = now;
        }
    }
    Err(Error::NoConvergence {
        iterations,
        score_norm: norm.as_f64(),
        beta: beta.iter().map(|v| v.as_f64()).collect(),
    })
}

/// Closed-form weighted least squares for the identity link with constant variance:
/// `(sum X'Sigma^{-1}X)^{-1} sum X'Sigma^{-1}Y`.
pub fn solve_wls<T: Real>(
    dataset: &ClusterDataset<T>,
    structure: &CovarianceStructure,
    gamma: &DispersionParams<T>,
) -> Result<QmlSolution<T>> {
    solve_wls_view(&dataset.view(), structure, gamma)
}

pub fn solve_wls_view<T: Real>(
    view: &ClusterView<'_, T>,
    structure: &CovarianceStructure,
    gamma: &DispersionParams<T>,
) -> Result<QmlSolution<T>> {
    let family = GlmFamily::gaussian();
    let zero = DVector::zeros(view.p());
    // at beta = 0 the residual is Y, so the score is X'WY
    let (_, info, rhs) = accumulate(view, &family, &zero, structure, gamma)?;
    let condition = linalg::condition_number(&info);
    if condition > max_condition::<T>() {
        return Err(Error::RankDeficient { condition });
    }
    let chol = linalg::cholesky(&info).ok_or(Error::RankDeficient { condition })?;
    let beta = chol.solve(&rhs);
    let (terms, info, score) = accumulate(view, &family, &beta, structure, gamma)?;
    finish(beta, terms, info, &score, 1, false)
}

/// `beta_tilde(gamma)` over a view: closed form for the linear model, Fisher scoring
/// (warm-started from `beta_init` when given) otherwise.
pub fn fit_view<T: Real>(
    view: &ClusterView<'_, T>,
    family: &GlmFamily,
    structure: &CovarianceStructure,
    gamma: &DispersionParams<T>,
    beta_init: Option<&DVector<T>>,
    settings: &ScoringSettings,
) -> Result<QmlSolution<T>> {
    if family.is_linear() {
        solve_wls_view(view, structure, gamma)
    } else {
        fisher_scoring_view(view, family, structure, gamma, beta_init, settings)
    }
}

pub fn fit<T: Real>(
    dataset: &ClusterDataset<T>,
    family: &GlmFamily,
    structure: &CovarianceStructure,
    gamma: &DispersionParams<T>,
    beta_init: Option<&DVector<T>>,
) -> Result<QmlSolution<T>> {
    fit_view(&dataset.view(), family, structure, gamma, beta_init, &ScoringSettings::default())
}
