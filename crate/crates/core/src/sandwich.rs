//! Finite-sample empirical sandwich loss via leave-one-cluster-out Woodbury updates,
//! and the large-sample plug-in sandwich.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::glm::{ClusterDataset, ClusterView, GlmFamily, TargetContrast};
use crate::linalg;
use crate::qml::{fit_view, ClusterTerms, QmlSolution, ScoringSettings};
use crate::scalar::Real;
use crate::working_cov::{CovarianceStructure, DispersionParams};

/// Leave-one-out quantities for one cluster.
#[derive(Clone, Debug)]
pub struct LooTerm<T: Real> {
    pub index: usize,
    /// `U_i = W_i^{-1} - D_i (D'WD)^{-1} D_i'`.
    pub u: DMatrix<T>,
    /// `T_i = (D'WD - D_i'W_iD_i)^{-1}`, in Woodbury form.
    pub t: DMatrix<T>,
    /// `S_i = D_i'W_iR_iR_i'W_iD_i`.
    pub s: DMatrix<T>,
    /// `beta_tilde_(-i) - beta_tilde = -T_i D_i'W_iR_i`.
    pub delta: DVector<T>,
}

#[derive(Clone, Debug)]
pub struct LooCache<T: Real> {
    pub terms: Vec<LooTerm<T>>,
}

impl<T: Real> LooCache<T> {
    pub fn build(solution: &QmlSolution<T>) -> Result<Self> {
        let terms = solution
            .terms
            .par_iter()
            .map(|ct| loo_term(solution, ct))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { terms })
    }

    /// `sum_i T_i S_i T_i`, summed in cluster order.
    pub fn vtilde(&self) -> DMatrix<T> {
        let p = self.terms.first().map_or(0, |t| t.delta.len());
        let mut v = DMatrix::zeros(p, p);
        for t in &self.terms {
            v += &t.delta * t.delta.transpose();
        }
        linalg::symmetrize(&mut v);
        v
    }
}

fn leverage_tolerance<T: Real>() -> T {
    T::of(100.0) * T::epsilon()
}

/// `U_i^{-1}`, or a full-leverage error for cluster `index`.
pub(crate) fn u_inverse<T: Real>(u: &DMatrix<T>, sigma: &DMatrix<T>, index: usize) -> Result<DMatrix<T>> {
    let scale = sigma.diagonal().iter().fold(T::zero(), |a, v| a.max(v.abs()));
    let tiny = leverage_tolerance::<T>() * scale;
    if let Some(ch) = linalg::cholesky(u) {
        let pivot = ch.l_dirty().diagonal().iter().fold(T::max_value().unwrap_or_else(T::one), |a, v| a.min(*v * *v));
        if pivot > tiny {
            let mut inv = ch.inverse();
            linalg::symmetrize(&mut inv);
            return Ok(inv);
        }
    }
    let mut sym = u.clone();
    linalg::symmetrize(&mut sym);
    if sym.iter().all(|v| v.is_finite()) {
        let eig = SymmetricEigen::new(sym.clone());
        let min = eig.eigenvalues.iter().fold(T::max_value().unwrap_or_else(T::one), |a, v| a.min(*v));
        if min > tiny {
            if let Some(inv) = linalg::spd_inverse_jittered(&sym) {
                return Ok(inv);
            }
        }
    }
    Err(Error::FullLeverage { cluster: index })
}

/// `T_i` from the full-sample inverse information and the cluster's terms.
pub(crate) fn woodbury_t<T: Real>(info_inv: &DMatrix<T>, ct: &ClusterTerms<T>) -> Result<(DMatrix<T>, DMatrix<T>)> {
    let dm = &ct.d * info_inv;
    let mut u = &ct.sigma - &dm * ct.d.transpose();
    linalg::symmetrize(&mut u);
    let u_inv = u_inverse(&u, &ct.sigma, ct.index)?;
    let mut t = info_inv + dm.transpose() * u_inv * &dm;
    linalg::symmetrize(&mut t);
    Ok((u, t))
}

fn loo_term<T: Real>(solution: &QmlSolution<T>, ct: &ClusterTerms<T>) -> Result<LooTerm<T>> {
    let (u, t) = woodbury_t(&solution.info_inv, ct)?;
    let s = &ct.dtwr * ct.dtwr.transpose();
    let delta = -(&t * &ct.dtwr);
    Ok(LooTerm { index: ct.index, u, t, s, delta })
}

/// Approximate `beta_tilde_(-i)(gamma) - beta_tilde(gamma)` for dataset cluster `i`;
/// exact in the linear model.
pub fn loo_beta<T: Real>(solution: &QmlSolution<T>, i: usize) -> Result<DVector<T>> {
    let ct = solution
        .terms
        .iter()
        .find(|t| t.index == i)
        .ok_or_else(|| Error::InvalidArgument(format!("cluster {i} is not part of the fit")))?;
    loo_term(solution, ct).map(|t| t.delta)
}

/// A loss value together with the matrix it is a quadratic form of.
#[derive(Clone, Debug)]
pub struct LossValue<T: Real> {
    /// `c' V c`.
    pub value: T,
    pub vtilde: DMatrix<T>,
    /// `beta_tilde(gamma)`.
    pub beta: DVector<T>,
}

fn require_clusters(have: usize, p: usize) -> Result<()> {
    if have < p + 1 {
        return Err(Error::TooFewClusters { have, need: p + 1 });
    }
    Ok(())
}

fn check_target<T: Real>(c: &TargetContrast<T>, p: usize) -> Result<()> {
    if c.len() != p {
        return Err(Error::InvalidArgument(format!("target has length {}, expected {p}", c.len())));
    }
    Ok(())
}

/// `L_SL = c' (sum_i T_i S_i T_i) c` at an already fitted solution.
///
/// The sum is left unscaled; a `1/I` factor would not move the minimizer.
pub fn loss_from_solution<T: Real>(solution: &QmlSolution<T>, c: &TargetContrast<T>) -> Result<LossValue<T>> {
    check_target(c, solution.beta.len())?;
    require_clusters(solution.num_clusters(), solution.beta.len())?;
    let vtilde = LooCache::build(solution)?.vtilde();
    Ok(LossValue { value: linalg::quad_form(&vtilde, c.vector()), vtilde, beta: solution.beta.clone() })
}

/// `c' M^{-1} S M^{-1} c / I` with `M`, `S` the cluster averages of `D'WD` and
/// `D'WRR'WD`, i.e. `c' (D'WD)^{-1} (sum S_i) (D'WD)^{-1} c`.
pub fn large_sample_from_solution<T: Real>(solution: &QmlSolution<T>, c: &TargetContrast<T>) -> Result<LossValue<T>> {
    check_target(c, solution.beta.len())?;
    require_clusters(solution.num_clusters(), solution.beta.len())?;
    let p = solution.beta.len();
    let mut meat = DMatrix::zeros(p, p);
    for t in &solution.terms {
        meat += &t.dtwr * t.dtwr.transpose();
    }
    let mut vtilde = &solution.info_inv * meat * &solution.info_inv;
    linalg::symmetrize(&mut vtilde);
    Ok(LossValue { value: linalg::quad_form(&vtilde, c.vector()), vtilde, beta: solution.beta.clone() })
}

/// Sandwich loss over a view, refitting `beta_tilde(gamma)` from `beta_init`.
pub fn sandwich_loss_view<T: Real>(
    view: &ClusterView<'_, T>,
    family: &GlmFamily,
    structure: &CovarianceStructure,
    gamma: &DispersionParams<T>,
    c: &TargetContrast<T>,
    beta_init: Option<&DVector<T>>,
    settings: &ScoringSettings,
) -> Result<LossValue<T>> {
    require_clusters(view.len(), view.p())?;
    let sol = fit_view(view, family, structure, gamma, beta_init, settings)?;
    loss_from_solution(&sol, c)
}

pub fn large_sample_sandwich_loss_view<T: Real>(
    view: &ClusterView<'_, T>,
    family: &GlmFamily,
    structure: &CovarianceStructure,
    gamma: &DispersionParams<T>,
    c: &TargetContrast<T>,
    beta_init: Option<&DVector<T>>,
    settings: &ScoringSettings,
) -> Result<LossValue<T>> {
    require_clusters(view.len(), view.p())?;
    let sol = fit_view(view, family, structure, gamma, beta_init, settings)?;
    large_sample_from_solution(&sol, c)
}

/// Finite-sample empirical sandwich loss `L_SL(gamma)`.
pub fn sandwich_loss<T: Real>(
    dataset: &ClusterDataset<T>,
    family: &GlmFamily,
    structure: &CovarianceStructure,
    gamma: &DispersionParams<T>,
    c: &TargetContrast<T>,
) -> Result<LossValue<T>> {
    sandwich_loss_view(&dataset.view(), family, structure, gamma, c, None, &ScoringSettings::default())
}

/// Large-sample plug-in sandwich loss.
pub fn large_sample_sandwich_loss<T: Real>(
    dataset: &ClusterDataset<T>,
    family: &GlmFamily,
    structure: &CovarianceStructure,
    gamma: &DispersionParams<T>,
    c: &TargetContrast<T>,
) -> Result<LossValue<T>> {
    large_sample_sandwich_loss_view(&dataset.view(), family, structure, gamma, c, None, &ScoringSettings::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glm::ClusterData;
    use crate::qml::{fisher_scoring, solve_wls};
    use crate::working_cov::ScaleMode;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn linear_data(rng: &mut ChaCha8Rng, clusters: usize, nmin: usize, nmax: usize, p: usize) -> ClusterDataset<f64> {
        let cs = (0..clusters)
            .map(|_| {
                let n = rng.random_range(nmin..=nmax);
                let u: f64 = rng.sample(StandardNormal);
                let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..p).map(|_| rng.sample(StandardNormal)).collect()).collect();
                let y: Vec<f64> = rows
                    .iter()
                    .map(|r| r.iter().sum::<f64>() + u + (1.0 + r[0].abs()) * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                ClusterData::from_rows(&y, &rows).unwrap()
            })
            .collect();
        ClusterDataset::new(cs).unwrap()
    }

    fn ungrouped(rng: &mut ChaCha8Rng, n: usize) -> (ClusterDataset<f64>, DMatrix<f64>, DVector<f64>) {
        let x: DMatrix<f64> = DMatrix::from_fn(n, 2, |_, k| if k == 0 { 1.0 } else { rng.sample(StandardNormal) });
        let y = DVector::from_fn(n, |j, _| 0.5 + x[(j, 1)] + (0.5 + x[(j, 1)].abs()) * rng.sample::<f64, _>(StandardNormal));
        let cs = (0..n)
            .map(|j| ClusterData::from_rows(&[y[j]], &[vec![x[(j, 0)], x[(j, 1)]]]).unwrap())
            .collect();
        (ClusterDataset::new(cs).unwrap(), x, y)
    }

    #[test]
    fn linear_loo_is_exact_refit() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = CovarianceStructure::exchangeable(ScaleMode::Free);
        let g = DispersionParams::from_slice(&[0.3, 1.4]);
        for _ in 0..5 {
            let ds = linear_data(&mut rng, 12, 2, 5, 3);
            let sol = solve_wls(&ds, &s, &g).unwrap();
            for i in 0..ds.num_clusters() {
                let approx = loo_beta(&sol, i).unwrap();
                let refit = solve_wls(&ds.without(i).unwrap(), &s, &g).unwrap();
                let exact = refit.beta - &sol.beta;
                assert!((&approx - &exact).amax() <= 1e-10 * exact.amax().max(1e-12), "cluster {i}");
            }
        }
    }

    #[test]
    fn zero_residual_cluster_has_zero_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let ds = linear_data(&mut rng, 8, 2, 4, 2);
        let s = CovarianceStructure::independence();
        let g = DispersionParams::empty();
        let sol = solve_wls(&ds, &s, &g).unwrap();
        // replace cluster 0's response by its fitted values and refit: R_0 stays zero
        let mut cs = ds.clusters().to_vec();
        let fitted = cs[0].x() * &sol.beta;
        cs[0] = cs[0].with_response(fitted);
        let ds2 = ClusterDataset::new(cs).unwrap();
        let sol2 = solve_wls(&ds2, &s, &g).unwrap();
        let r0 = ds2.cluster(0).y() - ds2.cluster(0).x() * &sol2.beta;
        let d = loo_beta(&sol2, 0).unwrap();
        assert!(d.amax() <= 1e-12 + 10.0 * r0.amax());
    }

    #[test]
    fn woodbury_t_is_deleted_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let ds = linear_data(&mut rng, 10, 1, 6, 3);
        let s = CovarianceStructure::ar1(ScaleMode::Unit);
        let sol = solve_wls(&ds, &s, &DispersionParams::from_slice(&[0.5])).unwrap();
        for ct in &sol.terms {
            let (_, t) = woodbury_t(&sol.info_inv, ct).unwrap();
            let direct = (&sol.info - &ct.dtwd).try_inverse().unwrap();
            assert!((&t - &direct).amax() <= 1e-8 * direct.amax());
        }
    }

    #[test]
    fn hc3_reduction() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (ds, x, y) = ungrouped(&mut rng, 25);
        let c = TargetContrast::new(DVector::from_vec(vec![0.3, 1.0])).unwrap();
        let loss = sandwich_loss(&ds, &GlmFamily::gaussian(), &CovarianceStructure::independence(), &DispersionParams::empty(), &c).unwrap();
        let xtx_inv = (x.transpose() * &x).try_inverse().unwrap();
        let b = &xtx_inv * x.transpose() * &y;
        let r = &y - &x * &b;
        let mut meat = DMatrix::zeros(2, 2);
        for j in 0..25 {
            let xj = x.row(j).transpose();
            let h = (xj.transpose() * &xtx_inv * &xj)[(0, 0)];
            meat += &xj * xj.transpose() * (r[j] * r[j] / ((1.0 - h) * (1.0 - h)));
        }
        let hc3 = &xtx_inv * meat * &xtx_inv;
        let expect = (c.vector().transpose() * hc3 * c.vector())[(0, 0)];
        assert_relative_eq!(loss.value, expect, max_relative = 1e-12);
    }

    #[test]
    fn hc0_reduction() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let (ds, x, y) = ungrouped(&mut rng, 30);
        let c = TargetContrast::coordinate(2, 1).unwrap();
        let loss = large_sample_sandwich_loss(&ds, &GlmFamily::gaussian(), &CovarianceStructure::independence(), &DispersionParams::empty(), &c).unwrap();
        let xtx_inv = (x.transpose() * &x).try_inverse().unwrap();
        let b = &xtx_inv * x.transpose() * &y;
        let r = &y - &x * &b;
        let meat = DMatrix::from_fn(2, 2, |a, bb| (0..30).map(|j| x[(j, a)] * x[(j, bb)] * r[j] * r[j]).sum());
        let hc0 = &xtx_inv * meat * &xtx_inv;
        assert_relative_eq!(loss.value, hc0[(1, 1)], max_relative = 1e-12);
    }

    #[test]
    fn perfect_fit_loses_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let ds = linear_data(&mut rng, 9, 2, 4, 2);
        let beta = DVector::from_vec(vec![1.5, -0.5]);
        let cs: Vec<_> = ds.clusters().iter().map(|c| c.with_response(c.x() * &beta)).collect();
        let ds = ClusterDataset::new(cs).unwrap();
        let s = CovarianceStructure::exchangeable(ScaleMode::Unit);
        let g = DispersionParams::from_slice(&[0.2]);
        let c = TargetContrast::coordinate(2, 0).unwrap();
        let fam = GlmFamily::gaussian();
        assert!(sandwich_loss(&ds, &fam, &s, &g, &c).unwrap().value < 1e-25);
        assert!(large_sample_sandwich_loss(&ds, &fam, &s, &g, &c).unwrap().value < 1e-25);
    }

    #[test]
    fn vtilde_is_sum_of_refit_outer_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let ds = linear_data(&mut rng, 15, 2, 5, 2);
        let s = CovarianceStructure::ar1(ScaleMode::Free);
        let g = DispersionParams::from_slice(&[0.6, 2.0]);
        let c = TargetContrast::coordinate(2, 0).unwrap();
        let loss = sandwich_loss(&ds, &GlmFamily::gaussian(), &s, &g, &c).unwrap();
        let full = solve_wls(&ds, &s, &g).unwrap();
        let mut v = DMatrix::zeros(2, 2);
        for i in 0..ds.num_clusters() {
            let d = solve_wls(&ds.without(i).unwrap(), &s, &g).unwrap().beta - &full.beta;
            v += &d * d.transpose();
        }
        assert!((&loss.vtilde - &v).amax() <= 1e-10 * v.amax());
    }

    #[test]
    fn response_scaling_is_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let ds = linear_data(&mut rng, 10, 2, 4, 2);
        let s = CovarianceStructure::exchangeable(ScaleMode::Unit);
        let g = DispersionParams::from_slice(&[0.4]);
        let c = TargetContrast::coordinate(2, 1).unwrap();
        let fam = GlmFamily::gaussian();
        let a = sandwich_loss(&ds, &fam, &s, &g, &c).unwrap().value;
        let b = sandwich_loss(&ds.scale_response(3.0), &fam, &s, &g, &c).unwrap().value;
        assert_relative_eq!(b, 9.0 * a, max_relative = 1e-10);
    }

    #[test]
    fn too_few_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let ds = linear_data(&mut rng, 3, 2, 3, 3);
        let c = TargetContrast::coordinate(3, 0).unwrap();
        let err = sandwich_loss(&ds, &GlmFamily::gaussian(), &CovarianceStructure::independence(), &DispersionParams::empty(), &c).unwrap_err();
        assert_eq!(err, Error::TooFewClusters { have: 3, need: 4 });
    }

    #[test]
    fn full_leverage_names_cluster() {
        // only cluster 2 informs the single coefficient
        let cs = (0..4)
            .map(|k| {
                let x = if k == 2 { 1.0 } else { 0.0 };
                ClusterData::from_rows(&[k as f64], &[vec![x]]).unwrap()
            })
            .collect();
        let ds = ClusterDataset::new(cs).unwrap();
        let c = TargetContrast::coordinate(1, 0).unwrap();
        let err = sandwich_loss(&ds, &GlmFamily::gaussian(), &CovarianceStructure::independence(), &DispersionParams::empty(), &c).unwrap_err();
        assert_eq!(err, Error::FullLeverage { cluster: 2 });
    }

    #[test]
    fn glm_loo_close_to_refit() {
        // one-step approximation is not exact for the logit link but should be close
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let cs = (0..80)
            .map(|_| {
                let rows: Vec<Vec<f64>> = (0..5).map(|_| vec![1.0, rng.sample(StandardNormal)]).collect();
                let y: Vec<f64> = rows
                    .iter()
                    .map(|r| if rng.random::<f64>() < 1.0 / (1.0 + (-(0.2 + r[1])).exp()) { 1.0 } else { 0.0 })
                    .collect();
                ClusterData::from_rows(&y, &rows).unwrap()
            })
            .collect();
        let ds = ClusterDataset::new(cs).unwrap();
        let fam = GlmFamily::binomial();
        let s = CovarianceStructure::exchangeable(ScaleMode::Unit);
        let g = DispersionParams::from_slice(&[0.2]);
        let sol = fisher_scoring(&ds, &fam, &s, &g, None).unwrap();
        for i in [0, 17, 55] {
            let approx = loo_beta(&sol, i).unwrap();
            let exact = fisher_scoring(&ds.without(i).unwrap(), &fam, &s, &g, Some(&sol.beta)).unwrap().beta - &sol.beta;
            assert!((&approx - &exact).amax() <= 0.05 * exact.amax() + 1e-6);
        }
    }
}
