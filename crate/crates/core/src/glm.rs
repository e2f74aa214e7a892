//! Cluster data and GLM family machinery: links, means, mean Jacobians and
//! variance-function diagonals.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// One independent cluster: responses `y` (length `n_i`) and covariates `x` (`n_i x p`).
///
/// Row order is the within-cluster observation order; serial working structures
/// read it as time order.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterData<T: Real> {
    y: DVector<T>,
    x: DMatrix<T>,
}

impl<T: Real> ClusterData<T> {
    pub fn new(y: DVector<T>, x: DMatrix<T>) -> Result<Self> {
        if y.is_empty() {
            return Err(Error::InvalidData("cluster has no observations".into()));
        }
        if x.nrows() != y.len() {
            return Err(Error::InvalidData(format!(
                "covariate rows ({}) do not match response length ({})",
                x.nrows(),
                y.len()
            )));
        }
        if x.ncols() == 0 {
            return Err(Error::InvalidData("covariate matrix has no columns".into()));
        }
        if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite entry in cluster".into()));
        }
        Ok(Self { y, x })
    }

    /// Builds a cluster from row-major covariates.
    pub fn from_rows(y: &[T], x_rows: &[Vec<T>]) -> Result<Self> {
        let p = x_rows.first().map_or(0, Vec::len);
        if x_rows.iter().any(|r| r.len() != p) {
            return Err(Error::InvalidData("ragged covariate rows".into()));
        }
        let flat: Vec<T> = x_rows.iter().flatten().copied().collect();
        Self::new(
            DVector::from_column_slice(y),
            DMatrix::from_row_slice(x_rows.len(), p, &flat),
        )
    }

    pub fn y(&self) -> &DVector<T> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<T> {
        &self.x
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn cast<U: Real>(&self) -> ClusterData<U> {
        ClusterData {
            y: self.y.map(|v| U::of(v.as_f64())),
            x: self.x.map(|v| U::of(v.as_f64())),
        }
    }

    pub(crate) fn with_response(&self, y: DVector<T>) -> Self {
        Self { y, x: self.x.clone() }
    }
}

/// Ordered list of clusters sharing a covariate dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterDataset<T: Real> {
    clusters: Vec<ClusterData<T>>,
    p: usize,
}

impl<T: Real> ClusterDataset<T> {
    pub fn new(clusters: Vec<ClusterData<T>>) -> Result<Self> {
        let p = clusters
            .first()
            .map(ClusterData::p)
            .ok_or_else(|| Error::InvalidData("dataset has no clusters".into()))?;
        if let Some(i) = clusters.iter().position(|c| c.p() != p) {
            return Err(Error::InvalidData(format!(
                "cluster {i} has {} covariates, expected {p}",
                clusters[i].p()
            )));
        }
        Ok(Self { clusters, p })
    }

    pub fn clusters(&self) -> &[ClusterData<T>] {
        &self.clusters
    }

    pub fn cluster(&self, i: usize) -> &ClusterData<T> {
        &self.clusters[i]
    }

    pub fn num_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn n_total(&self) -> usize {
        self.clusters.iter().map(ClusterData::len).sum()
    }

    pub fn max_group_size(&self) -> usize {
        self.clusters.iter().map(ClusterData::len).max().unwrap_or(1)
    }

    /// Copy of the dataset with cluster `i` removed.
    pub fn without(&self, i: usize) -> Result<Self> {
        let clusters: Vec<_> = self
            .clusters
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, c)| c.clone())
            .collect();
        Self::new(clusters)
    }

    pub fn view(&self) -> ClusterView<'_, T> {
        ClusterView { data: self, skip: None }
    }

    /// View of the dataset with cluster `i` left out (no copy).
    pub fn leave_out(&self, i: usize) -> ClusterView<'_, T> {
        ClusterView { data: self, skip: Some(i) }
    }

    pub fn cast<U: Real>(&self) -> ClusterDataset<U> {
        ClusterDataset {
            clusters: self.clusters.iter().map(ClusterData::cast).collect(),
            p: self.p,
        }
    }

    /// Same covariates, responses multiplied by `s`.
    pub fn scale_response(&self, s: T) -> Self {
        Self {
            clusters: self.clusters.iter().map(|c| c.with_response(c.y() * s)).collect(),
            p: self.p,
        }
    }
}

/// Borrowed view of a dataset, optionally with one cluster omitted.
#[derive(Clone, Copy, Debug)]
pub struct ClusterView<'a, T: Real> {
    data: &'a ClusterDataset<T>,
    skip: Option<usize>,
}

impl<'a, T: Real> ClusterView<'a, T> {
    pub fn dataset(&self) -> &'a ClusterDataset<T> {
        self.data
    }

    pub fn skipped(&self) -> Option<usize> {
        self.skip
    }

    pub fn p(&self) -> usize {
        self.data.p
    }

    pub fn len(&self) -> usize {
        self.data.num_clusters() - usize::from(self.skip.is_some())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clusters in order, paired with their index in the full dataset.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &'a ClusterData<T>)> + '_ {
        let skip = self.skip;
        self.data
            .clusters
            .iter()
            .enumerate()
            .filter(move |(i, _)| Some(*i) != skip)
    }

    pub fn indices(&self) -> Vec<usize> {
        self.iter().map(|(i, _)| i).collect()
    }
}

/// Link function `g`, mapping the mean to the linear predictor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Link {
    Identity,
    Logit,
    Log,
}

impl Link {
    pub fn link<T: Real>(self, mu: T) -> T {
        match self {
            Link::Identity => mu,
            Link::Logit => mu.ln() - (T::one() - mu).ln(),
            Link::Log => mu.ln(),
        }
    }

    /// `g^{-1}(eta)`. The logit branch keeps the exponent non-positive.
    pub fn inverse<T: Real>(self, eta: T) -> T {
        match self {
            Link::Identity => eta,
            Link::Logit => {
                if eta >= T::zero() {
                    T::one() / (T::one() + (-eta).exp())
                } else {
                    let e = eta.exp();
                    e / (T::one() + e)
                }
            }
            Link::Log => eta.exp(),
        }
    }

    /// `g'(mu)`.
    pub fn derivative<T: Real>(self, mu: T) -> T {
        match self {
            Link::Identity => T::one(),
            Link::Logit => T::one() / (mu * (T::one() - mu)),
            Link::Log => T::one() / mu,
        }
    }

    /// `d mu / d eta = 1 / g'(g^{-1}(eta))`, evaluated from `eta` directly.
    pub fn mu_eta<T: Real>(self, eta: T) -> T {
        match self {
            Link::Identity => T::one(),
            Link::Logit => {
                let e = (-eta.abs()).exp();
                let d = T::one() + e;
                e / (d * d)
            }
            Link::Log => eta.exp(),
        }
    }
}

/// GLM variance function `v(mu)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VarianceFn {
    Constant,
    Binomial,
    Poisson,
}

impl VarianceFn {
    pub fn eval<T: Real>(self, mu: T) -> T {
        match self {
            VarianceFn::Constant => T::one(),
            VarianceFn::Binomial => mu * (T::one() - mu),
            VarianceFn::Poisson => mu,
        }
    }
}

/// Mean model: a link together with a variance function.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GlmFamily {
    pub link: Link,
    pub variance: VarianceFn,
}

impl GlmFamily {
    pub fn new(link: Link, variance: VarianceFn) -> Self {
        Self { link, variance }
    }

    pub fn gaussian() -> Self {
        Self::new(Link::Identity, VarianceFn::Constant)
    }

    pub fn binomial() -> Self {
        Self::new(Link::Logit, VarianceFn::Binomial)
    }

    pub fn poisson() -> Self {
        Self::new(Link::Log, VarianceFn::Poisson)
    }

    pub fn is_linear(&self) -> bool {
        self.link == Link::Identity && self.variance == VarianceFn::Constant
    }

    /// `v(g^{-1}(eta))`; the binomial-logit pairing uses the cancellation-free form.
    pub fn variance_at<T: Real>(&self, eta: T) -> T {
        match (self.link, self.variance) {
            (Link::Logit, VarianceFn::Binomial) => self.link.mu_eta(eta),
            (_, v) => v.eval(self.link.inverse(eta)),
        }
    }
}

/// Nonzero contrast vector `c` selecting the target `c' beta`.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetContrast<T: Real>(DVector<T>);

impl<T: Real> TargetContrast<T> {
    pub fn new(c: DVector<T>) -> Result<Self> {
        if c.is_empty() || c.iter().all(|v| *v == T::zero()) {
            return Err(Error::InvalidArgument("target contrast must be nonzero".into()));
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("target contrast must be finite".into()));
        }
        Ok(Self(c))
    }

    /// Unit vector on coordinate `k` of a length-`p` coefficient vector.
    pub fn coordinate(p: usize, k: usize) -> Result<Self> {
        if k >= p {
            return Err(Error::InvalidArgument(format!("coordinate {k} out of range for p = {p}")));
        }
        let mut c = DVector::zeros(p);
        c[k] = T::one();
        Ok(Self(c))
    }

    pub fn vector(&self) -> &DVector<T> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `X_i beta`.
pub fn linear_predictor<T: Real>(cluster: &ClusterData<T>, beta: &DVector<T>) -> DVector<T> {
    cluster.x() * beta
}

/// `mu_i(beta) = g^{-1}(X_i beta)`, component-wise.
pub fn mean_vector<T: Real>(cluster: &ClusterData<T>, family: &GlmFamily, beta: &DVector<T>) -> DVector<T> {
    linear_predictor(cluster, beta).map(|eta| family.link.inverse(eta))
}

/// `D_i(beta)` with entries `X_jk / g'(g^{-1}(X_j. beta))`.
pub fn mean_jacobian<T: Real>(cluster: &ClusterData<T>, family: &GlmFamily, beta: &DVector<T>) -> DMatrix<T> {
    if family.link == Link::Identity {
        return cluster.x().clone();
    }
    let eta = linear_predictor(cluster, beta);
    let mut d = cluster.x().clone();
    for (j, e) in eta.iter().enumerate() {
        let s = family.link.mu_eta(*e);
        d.row_mut(j).scale_mut(s);
    }
    d
}

/// Diagonal of `A_i(beta) = diag(v(mu_i(beta)))`.
///
/// `cluster_index` only labels the error.
pub fn variance_diag<T: Real>(
    cluster: &ClusterData<T>,
    family: &GlmFamily,
    beta: &DVector<T>,
    cluster_index: usize,
) -> Result<DVector<T>> {
    let eta = linear_predictor(cluster, beta);
    let a = eta.map(|e| family.variance_at(e));
    let floor = T::of(1e-300);
    if let Some((obs, v)) = a.iter().enumerate().find(|(_, v)| !(**v > floor) || !v.is_finite()) {
        return Err(Error::DegenerateMean { cluster: cluster_index, obs, value: v.as_f64() });
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn one_row(x: &[f64], y: f64) -> ClusterData<f64> {
        ClusterData::from_rows(&[y], &[x.to_vec()]).unwrap()
    }

    #[test]
    fn rejects_bad_clusters() {
        assert!(ClusterData::<f64>::from_rows(&[], &[]).is_err());
        assert!(ClusterData::new(DVector::from_vec(vec![1.0, 2.0]), DMatrix::zeros(1, 2)).is_err());
        assert!(ClusterData::from_rows(&[f64::NAN], &[vec![1.0]]).is_err());
        let a = one_row(&[1.0, 2.0], 0.0);
        let b = one_row(&[1.0], 0.0);
        assert!(ClusterDataset::new(vec![a, b]).is_err());
        assert!(ClusterDataset::<f64>::new(vec![]).is_err());
    }

    #[test]
    fn views_skip_one_cluster() {
        let ds = ClusterDataset::new((0..4).map(|k| one_row(&[k as f64], 0.0)).collect()).unwrap();
        assert_eq!(ds.leave_out(2).indices(), vec![0, 1, 3]);
        assert_eq!(ds.view().len(), 4);
        assert_eq!(ds.without(0).unwrap().num_clusters(), 3);
    }

    #[test]
    fn identity_mean_at_zero() {
        let c = one_row(&[1.0, 2.0], 0.0);
        let mu = mean_vector(&c, &GlmFamily::gaussian(), &DVector::zeros(2));
        assert_eq!(mu[0], 0.0);
    }

    #[test]
    fn logit_mean_at_zero() {
        let c = one_row(&[1.0, 2.0], 0.0);
        let mu = mean_vector(&c, &GlmFamily::binomial(), &DVector::zeros(2));
        assert_eq!(mu[0], 0.5);
    }

    #[test]
    fn log_mean() {
        let c = ClusterData::from_rows(&[0.0, 0.0], &[vec![2f64.ln()], vec![3f64.ln()]]).unwrap();
        let mu = mean_vector(&c, &GlmFamily::poisson(), &DVector::from_element(1, 1.0));
        assert_relative_eq!(mu[0], 2.0, max_relative = 1e-15);
        assert_relative_eq!(mu[1], 3.0, max_relative = 1e-15);
    }

    #[test]
    fn logit_never_nan() {
        for eta in [-1000.0, -710.0, -30.0, 0.0, 30.0, 710.0, 1000.0] {
            let mu: f64 = Link::Logit.inverse(eta);
            assert!(mu.is_finite() && (0.0..=1.0).contains(&mu));
            assert!(Link::Logit.mu_eta(eta).is_finite());
        }
        let mu: f64 = Link::Logit.inverse(20.0);
        assert!(mu > 0.0 && mu < 1.0);
    }

    #[test]
    fn identity_jacobian_is_x() {
        let c = ClusterData::from_rows(&[0.0, 1.0], &[vec![0.3, -1.2], vec![2.5, 0.1]]).unwrap();
        let d = mean_jacobian(&c, &GlmFamily::gaussian(), &DVector::from_vec(vec![0.7, -0.2]));
        assert_eq!(&d, c.x());
    }

    #[test]
    fn logit_jacobian_at_zero() {
        let c = one_row(&[1.0, 2.0], 0.0);
        let d = mean_jacobian(&c, &GlmFamily::binomial(), &DVector::zeros(2));
        assert_relative_eq!(d[(0, 0)], 0.25, epsilon = 1e-15);
        assert_relative_eq!(d[(0, 1)], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn variance_diagonals() {
        let c = one_row(&[1.0], 0.0);
        let a = variance_diag(&c, &GlmFamily::gaussian(), &DVector::from_element(1, 3.0), 0).unwrap();
        assert_eq!(a[0], 1.0);
        let a = variance_diag(&c, &GlmFamily::binomial(), &DVector::zeros(1), 0).unwrap();
        assert_eq!(a[0], 0.25);
        let c = ClusterData::from_rows(&[0.0, 0.0], &[vec![2f64.ln()], vec![3f64.ln()]]).unwrap();
        let a = variance_diag(&c, &GlmFamily::poisson(), &DVector::from_element(1, 1.0), 0).unwrap();
        assert_relative_eq!(a[0], 2.0, max_relative = 1e-15);
        assert_relative_eq!(a[1], 3.0, max_relative = 1e-15);
    }

    #[test]
    fn degenerate_variance_reported() {
        let c = one_row(&[1.0], 0.0);
        let err = variance_diag(&c, &GlmFamily::binomial(), &DVector::from_element(1, 800.0), 4).unwrap_err();
        assert!(matches!(err, Error::DegenerateMean { cluster: 4, .. }));
    }

    #[test]
    fn link_round_trip_grid() {
        // g(g^{-1}(eta)) for the logit loses digits once 1 - mu drops below
        // ~1e-6: mu itself is rounded to a spacing of eps near 1, which moves
        // the recovered eta by about eps * e^{|eta|}. The tolerance tracks that
        // representability limit and is 1e-10 wherever f64 allows it.
        for link in [Link::Identity, Link::Logit, Link::Log] {
            for k in 0..=600 {
                let eta = -30.0 + 0.1 * k as f64;
                let back = link.link(link.inverse(eta));
                let tol = match link {
                    Link::Logit => 1e-10f64.max(4.0 * f64::EPSILON * eta.exp()),
                    _ => 1e-10,
                };
                assert!((back - eta).abs() <= tol, "{link:?} eta={eta} back={back}");
            }
        }
    }

    #[test]
    fn link_derivative_matches_finite_difference() {
        for (link, mus) in [
            (Link::Identity, vec![-2.0, 0.0, 3.5]),
            (Link::Logit, vec![0.1, 0.5, 0.93]),
            (Link::Log, vec![0.2, 1.0, 7.0]),
        ] {
            for mu in mus {
                let h = 1e-6;
                let fd = (link.link(mu + h) - link.link(mu - h)) / (2.0 * h);
                assert_relative_eq!(link.derivative(mu), fd, max_relative = 1e-6);
                let eta = link.link(mu);
                assert_relative_eq!(link.mu_eta(eta), 1.0 / link.derivative(mu), max_relative = 1e-12);
            }
        }
    }

    fn family_strategy() -> impl Strategy<Value = GlmFamily> {
        prop_oneof![
            Just(GlmFamily::gaussian()),
            Just(GlmFamily::binomial()),
            Just(GlmFamily::poisson()),
        ]
    }

    proptest! {
        #[test]
        fn jacobian_matches_finite_difference(
            family in family_strategy(),
            rows in proptest::collection::vec(proptest::collection::vec(-1.5f64..1.5, 3), 1..6),
            beta in proptest::collection::vec(-1.0f64..1.0, 3),
        ) {
            let y = vec![0.0; rows.len()];
            let c = ClusterData::from_rows(&y, &rows).unwrap();
            let beta = DVector::from_vec(beta);
            let d = mean_jacobian(&c, &family, &beta);
            let h = 1e-6;
            for k in 0..3 {
                let mut up = beta.clone();
                up[k] += h;
                let mut dn = beta.clone();
                dn[k] -= h;
                let fd = (mean_vector(&c, &family, &up) - mean_vector(&c, &family, &dn)) / (2.0 * h);
                for j in 0..rows.len() {
                    prop_assert!((d[(j, k)] - fd[j]).abs() <= 1e-6, "{} vs {}", d[(j, k)], fd[j]);
                }
            }
        }
    }
}
