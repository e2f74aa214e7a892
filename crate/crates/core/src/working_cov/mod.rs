//! Parametric working covariance structures `P_i(gamma)`, the weights
//! `W_i = A_i^{-1/2} P_i^{-1} A_i^{-1/2}`, and the map between the constrained
//! dispersion space and the unconstrained optimizer coordinates.

pub mod arma;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::glm::{variance_diag, ClusterData, GlmFamily};
use crate::linalg;
use crate::scalar::Real;

pub use arma::{arma_autocorrelation, arma_autocovariance};

/// Margin keeping correlations strictly inside their admissible interval.
pub const CORRELATION_MARGIN: f64 = 1e-6;

/// Random-effects design `Z`: optional intercept plus powers of covariate columns.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RandomEffectsDesign {
    pub intercept: bool,
    /// `(column, power)` pairs; column indexes the cluster covariate matrix.
    pub terms: Vec<(usize, u32)>,
}

impl RandomEffectsDesign {
    pub fn intercept_only() -> Self {
        Self { intercept: true, terms: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        usize::from(self.intercept) + self.terms.len()
    }

    pub fn design<T: Real>(&self, cluster: &ClusterData<T>) -> Result<DMatrix<T>> {
        let n = cluster.len();
        let mut z = DMatrix::zeros(n, self.dim());
        let mut col = 0;
        if self.intercept {
            z.column_mut(0).fill(T::one());
            col = 1;
        }
        for &(c, power) in &self.terms {
            if c >= cluster.p() {
                return Err(Error::InvalidStructure(format!(
                    "random-effects column {c} out of range (p = {})",
                    cluster.p()
                )));
            }
            for j in 0..n {
                z[(j, col)] = cluster.x()[(j, c)].powi(power as i32);
            }
            col += 1;
        }
        Ok(z)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum CorrelationKind {
    Independence,
    Exchangeable,
    Ar1,
    Arma { p: usize, q: usize },
    RandomEffects(RandomEffectsDesign),
    /// Heteroscedastic two-level variance: `gamma_1` where covariate `column >= 0`,
    /// `gamma_2` elsewhere; no within-cluster correlation.
    TwoPiece { column: usize },
}

/// Whether the working matrix carries a free multiplicative scale `phi`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScaleMode {
    Unit,
    Free,
}

impl ScaleMode {
    /// Unit scale for the binomial and Poisson families, free otherwise.
    pub fn default_for(family: &GlmFamily) -> Self {
        match family.variance {
            crate::glm::VarianceFn::Constant => ScaleMode::Free,
            _ => ScaleMode::Unit,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CovarianceStructure {
    pub kind: CorrelationKind,
    pub scale: ScaleMode,
}

/// Point in the constrained dispersion space; layout documented on
/// [`CovarianceStructure::param_names`].
#[derive(Clone, Debug, PartialEq)]
pub struct DispersionParams<T: Real>(pub DVector<T>);

/// Optimizer coordinates; every point of `R^q` is admissible.
#[derive(Clone, Debug, PartialEq)]
pub struct UnconstrainedParams<T: Real>(pub DVector<T>);

impl<T: Real> DispersionParams<T> {
    pub fn from_slice(v: &[T]) -> Self {
        Self(DVector::from_column_slice(v))
    }

    pub fn empty() -> Self {
        Self(DVector::zeros(0))
    }

    pub fn as_slice(&self) -> &[T] {
        self.0.as_slice()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<T: Real> UnconstrainedParams<T> {
    pub fn zeros(q: usize) -> Self {
        Self(DVector::zeros(q))
    }

    pub fn as_slice(&self) -> &[T] {
        self.0.as_slice()
    }
}

fn correlation_interval<T: Real>(kind: &CorrelationKind, n_max: usize) -> (T, T) {
    let eps = T::of(CORRELATION_MARGIN);
    match kind {
        CorrelationKind::Exchangeable => {
            let lo = if n_max >= 2 { -T::one() / T::of((n_max - 1) as f64) } else { -T::one() };
            (lo + eps, T::one() - eps)
        }
        _ => (-T::one() + eps, T::one() - eps),
    }
}

fn to_interval<T: Real>(theta: T, lo: T, hi: T) -> T {
    let mid = (lo + hi) * T::half();
    let half = (hi - lo) * T::half();
    mid + half * theta.tanh()
}

fn from_interval<T: Real>(x: T, lo: T, hi: T, name: &str) -> Result<T> {
    let mid = (lo + hi) * T::half();
    let half = (hi - lo) * T::half();
    let u = (x - mid) / half;
    if !(u.abs() < T::one()) {
        return Err(Error::InvalidParams(format!(
            "{name} = {} outside ({}, {})",
            x.as_f64(),
            lo.as_f64(),
            hi.as_f64()
        )));
    }
    Ok(u.atanh())
}

fn positive_log<T: Real>(x: T, name: &str) -> Result<T> {
    if !(x > T::zero()) || !x.is_finite() {
        return Err(Error::InvalidParams(format!("{name} must be positive, got {}", x.as_f64())));
    }
    Ok(x.ln())
}

impl CovarianceStructure {
    pub fn new(kind: CorrelationKind, scale: ScaleMode) -> Result<Self> {
        let s = Self { kind, scale };
        s.validate()?;
        Ok(s)
    }

    pub fn independence() -> Self {
        Self { kind: CorrelationKind::Independence, scale: ScaleMode::Unit }
    }

    /// Independence with a free scale `phi`: `P = phi I`.
    pub fn independence_free() -> Self {
        Self { kind: CorrelationKind::Independence, scale: ScaleMode::Free }
    }

    pub fn exchangeable(scale: ScaleMode) -> Self {
        Self { kind: CorrelationKind::Exchangeable, scale }
    }

    pub fn ar1(scale: ScaleMode) -> Self {
        Self { kind: CorrelationKind::Ar1, scale }
    }

    pub fn arma(p: usize, q: usize, scale: ScaleMode) -> Result<Self> {
        Self::new(CorrelationKind::Arma { p, q }, scale)
    }

    pub fn random_effects(design: RandomEffectsDesign) -> Result<Self> {
        Self::new(CorrelationKind::RandomEffects(design), ScaleMode::Unit)
    }

    pub fn two_piece(column: usize) -> Self {
        Self { kind: CorrelationKind::TwoPiece { column }, scale: ScaleMode::Unit }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            CorrelationKind::Arma { p, q } if p + q == 0 => {
                Err(Error::InvalidStructure("ARMA orders must satisfy p + q >= 1".into()))
            }
            CorrelationKind::RandomEffects(d) if d.dim() == 0 => {
                Err(Error::InvalidStructure("random-effects design has no columns".into()))
            }
            CorrelationKind::RandomEffects(_) | CorrelationKind::TwoPiece { .. } if self.scale == ScaleMode::Free => {
                Err(Error::InvalidStructure(
                    "random-effects and two-piece structures carry their own scale; use unit scale mode".into(),
                ))
            }
            _ => Ok(()),
        }
    }

    /// Checks covariate-column selectors against the dataset dimension.
    pub fn validate_for(&self, p: usize) -> Result<()> {
        self.validate()?;
        match &self.kind {
            CorrelationKind::RandomEffects(d) => match d.terms.iter().find(|(c, _)| *c >= p) {
                Some((c, _)) => Err(Error::InvalidStructure(format!("random-effects column {c} out of range (p = {p})"))),
                None => Ok(()),
            },
            CorrelationKind::TwoPiece { column } if *column >= p => {
                Err(Error::InvalidStructure(format!("two-piece column {column} out of range (p = {p})")))
            }
            _ => Ok(()),
        }
    }

    /// True when the scale enters only as a multiplicative factor on a correlation matrix.
    pub fn has_separable_scale(&self) -> bool {
        self.scale == ScaleMode::Free
            && !matches!(self.kind, CorrelationKind::RandomEffects(_) | CorrelationKind::TwoPiece { .. })
    }

    fn core_dim(&self) -> usize {
        match &self.kind {
            CorrelationKind::Independence => 0,
            CorrelationKind::Exchangeable | CorrelationKind::Ar1 => 1,
            CorrelationKind::Arma { p, q } => p + q,
            CorrelationKind::RandomEffects(d) => d.dim() * (d.dim() + 1) / 2 + 1,
            CorrelationKind::TwoPiece { .. } => 2,
        }
    }

    /// Number of dispersion parameters `q`.
    pub fn dim(&self) -> usize {
        self.core_dim() + usize::from(self.has_separable_scale())
    }

    /// Index of the separable scale coordinate, if any (always last).
    pub fn scale_index(&self) -> Option<usize> {
        self.has_separable_scale().then(|| self.core_dim())
    }

    /// Names of the dispersion coordinates, in layout order.
    ///
    /// exchangeable/ar1: `rho[, scale]`; arma: `ar1..arp, ma1..maq[, scale]`;
    /// random effects: row-major lower Cholesky factor of the random-effect covariance
    /// `L11, L21, L22, ...` then `sigma`; two-piece: `gamma1, gamma2`.
    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = match &self.kind {
            CorrelationKind::Independence => vec![],
            CorrelationKind::Exchangeable | CorrelationKind::Ar1 => vec!["rho".into()],
            CorrelationKind::Arma { p, q } => (1..=*p)
                .map(|k| format!("ar{k}"))
                .chain((1..=*q).map(|k| format!("ma{k}")))
                .collect(),
            CorrelationKind::RandomEffects(d) => {
                let mut v = Vec::new();
                for r in 0..d.dim() {
                    for c in 0..=r {
                        v.push(format!("L{}{}", r + 1, c + 1));
                    }
                }
                v.push("sigma".into());
                v
            }
            CorrelationKind::TwoPiece { .. } => vec!["gamma1".into(), "gamma2".into()],
        };
        if self.has_separable_scale() {
            names.push("scale".into());
        }
        names
    }

    pub fn label(&self) -> String {
        let base = match &self.kind {
            CorrelationKind::Independence => "independence".to_string(),
            CorrelationKind::Exchangeable => "exchangeable".to_string(),
            CorrelationKind::Ar1 => "ar1".to_string(),
            CorrelationKind::Arma { p, q } => format!("arma({p},{q})"),
            CorrelationKind::RandomEffects(d) => format!("random_effects({})", d.dim()),
            CorrelationKind::TwoPiece { column } => format!("two_piece(x{column})"),
        };
        match self.scale {
            ScaleMode::Free => format!("{base}+scale"),
            ScaleMode::Unit => base,
        }
    }

    fn scale_of<T: Real>(&self, gamma: &DispersionParams<T>) -> T {
        self.scale_index().map_or(T::one(), |k| gamma.0[k])
    }

    /// Checks a constrained point against the admissible region for group sizes up to `n_max`.
    pub fn check_params<T: Real>(&self, gamma: &DispersionParams<T>, n_max: usize) -> Result<()> {
        self.pack(gamma, n_max).map(|_| ())
    }

    /// Constrained -> unconstrained.
    pub fn pack<T: Real>(&self, gamma: &DispersionParams<T>, n_max: usize) -> Result<UnconstrainedParams<T>> {
        if gamma.len() != self.dim() {
            return Err(Error::InvalidParams(format!(
                "{} expects {} dispersion parameters, got {}",
                self.label(),
                self.dim(),
                gamma.len()
            )));
        }
        let g = gamma.as_slice();
        let mut theta = Vec::with_capacity(g.len());
        match &self.kind {
            CorrelationKind::Independence => {}
            CorrelationKind::Exchangeable | CorrelationKind::Ar1 => {
                let (lo, hi) = correlation_interval::<T>(&self.kind, n_max);
                theta.push(from_interval(g[0], lo, hi, "rho")?);
            }
            CorrelationKind::Arma { p, q } => {
                for r in arma::coefficients_to_pacf(&g[..*p])? {
                    theta.push(r.atanh());
                }
                let neg_ma: Vec<T> = g[*p..p + q].iter().map(|v| -*v).collect();
                for r in arma::coefficients_to_pacf(&neg_ma)
                    .map_err(|_| Error::NonStationary("MA polynomial is not invertible".into()))?
                {
                    theta.push(r.atanh());
                }
            }
            CorrelationKind::RandomEffects(d) => {
                let k = d.dim();
                let mut idx = 0;
                for r in 0..k {
                    for c in 0..=r {
                        theta.push(if r == c { positive_log(g[idx], "Cholesky diagonal")? } else { g[idx] });
                        idx += 1;
                    }
                }
                theta.push(positive_log(g[idx], "sigma")?);
            }
            CorrelationKind::TwoPiece { .. } => {
                theta.push(positive_log(g[0], "gamma1")?);
                theta.push(positive_log(g[1], "gamma2")?);
            }
        }
        if let Some(k) = self.scale_index() {
            theta.push(positive_log(g[k], "scale")?);
        }
        Ok(UnconstrainedParams(DVector::from_vec(theta)))
    }

    /// Unconstrained -> constrained; total on `R^q`.
    pub fn unpack<T: Real>(&self, theta: &UnconstrainedParams<T>, n_max: usize) -> DispersionParams<T> {
        let t = theta.as_slice();
        assert_eq!(t.len(), self.dim(), "unconstrained vector has wrong length");
        let mut g = Vec::with_capacity(t.len());
        match &self.kind {
            CorrelationKind::Independence => {}
            CorrelationKind::Exchangeable | CorrelationKind::Ar1 => {
                let (lo, hi) = correlation_interval::<T>(&self.kind, n_max);
                g.push(to_interval(t[0], lo, hi));
            }
            CorrelationKind::Arma { p, q } => {
                let r_ar: Vec<T> = t[..*p].iter().map(|v| v.tanh()).collect();
                g.extend(arma::pacf_to_coefficients(&r_ar));
                let r_ma: Vec<T> = t[*p..p + q].iter().map(|v| v.tanh()).collect();
                g.extend(arma::pacf_to_coefficients(&r_ma).into_iter().map(|v| -v));
            }
            CorrelationKind::RandomEffects(d) => {
                let k = d.dim();
                let mut idx = 0;
                for r in 0..k {
                    for c in 0..=r {
                        g.push(if r == c { t[idx].exp() } else { t[idx] });
                        idx += 1;
                    }
                }
                g.push(t[idx].exp());
            }
            CorrelationKind::TwoPiece { .. } => {
                g.push(t[0].exp());
                g.push(t[1].exp());
            }
        }
        if let Some(k) = self.scale_index() {
            g.push(t[k].exp());
        }
        DispersionParams(DVector::from_vec(g))
    }

    /// Embeds the dispersion estimate of a smaller nested structure into this one
    /// (extra coefficients set to zero). `None` when the structures are not nested.
    pub fn embed<T: Real>(&self, smaller: &CovarianceStructure, gamma: &DispersionParams<T>) -> Option<DispersionParams<T>> {
        if smaller.dim() != gamma.len() {
            return None;
        }
        let g = gamma.as_slice();
        let (sp, sq, s_scale) = match smaller.kind {
            CorrelationKind::Independence => (0, 0, smaller.scale_index().map(|k| g[k])),
            CorrelationKind::Ar1 => (1, 0, smaller.scale_index().map(|k| g[k])),
            CorrelationKind::Arma { p, q } => (p, q, smaller.scale_index().map(|k| g[k])),
            _ => return None,
        };
        let mut out = match (&self.kind, &smaller.kind) {
            (CorrelationKind::Arma { p, q }, _) if *p >= sp && *q >= sq => {
                let mut v = vec![T::zero(); p + q];
                v[..sp].copy_from_slice(&g[..sp]);
                v[*p..*p + sq].copy_from_slice(&g[sp..sp + sq]);
                v
            }
            (CorrelationKind::Ar1, CorrelationKind::Independence) => vec![T::zero()],
            (CorrelationKind::Ar1, CorrelationKind::Ar1) => vec![g[0]],
            (CorrelationKind::Exchangeable, CorrelationKind::Independence) => vec![T::zero()],
            _ => return None,
        };
        if self.has_separable_scale() {
            out.push(s_scale.unwrap_or_else(T::one));
        }
        Some(DispersionParams(DVector::from_vec(out)))
    }
}

/// Position-indexed working matrix `P(gamma)` of size `n` (includes the scale factor).
///
/// Defined for the kinds that do not read covariates; random effects and the
/// two-piece structure go through [`working_matrix`].
pub fn build_correlation<T: Real>(structure: &CovarianceStructure, gamma: &DispersionParams<T>, n: usize) -> Result<DMatrix<T>> {
    let g = gamma.as_slice();
    if g.len() != structure.dim() {
        return Err(Error::InvalidParams(format!(
            "{} expects {} dispersion parameters, got {}",
            structure.label(),
            structure.dim(),
            g.len()
        )));
    }
    let mut m = match &structure.kind {
        CorrelationKind::Independence => DMatrix::identity(n, n),
        CorrelationKind::Exchangeable => {
            let rho = g[0];
            DMatrix::from_fn(n, n, |j, k| if j == k { T::one() } else { rho })
        }
        CorrelationKind::Ar1 => {
            let rho = g[0];
            let mut powers = vec![T::one(); n.max(1)];
            for k in 1..n {
                powers[k] = powers[k - 1] * rho;
            }
            DMatrix::from_fn(n, n, |j, k| powers[j.abs_diff(k)])
        }
        CorrelationKind::Arma { p, q } => {
            let acf = arma_autocorrelation(&g[..*p], &g[*p..p + q], n.saturating_sub(1))?;
            DMatrix::from_fn(n, n, |j, k| acf[j.abs_diff(k)])
        }
        CorrelationKind::RandomEffects(_) | CorrelationKind::TwoPiece { .. } => {
            return Err(Error::InvalidStructure(format!(
                "{} depends on covariates; use working_matrix",
                structure.label()
            )))
        }
    };
    let scale = structure.scale_of(gamma);
    if scale != T::one() {
        m *= scale;
    }
    Ok(m)
}

/// `Z_i V_u Z_i' + sigma^2 I` with `V_u = L L'` read from `gamma`.
pub fn random_effects_cov<T: Real>(
    design: &RandomEffectsDesign,
    gamma: &DispersionParams<T>,
    cluster: &ClusterData<T>,
) -> Result<DMatrix<T>> {
    let k = design.dim();
    let g = gamma.as_slice();
    if g.len() != k * (k + 1) / 2 + 1 {
        return Err(Error::InvalidParams("random-effects parameter vector has wrong length".into()));
    }
    let mut l = DMatrix::<T>::zeros(k, k);
    let mut idx = 0;
    for r in 0..k {
        for c in 0..=r {
            l[(r, c)] = g[idx];
            idx += 1;
        }
    }
    let sigma = g[idx];
    let z = design.design(cluster)?;
    let zl = &z * &l;
    let mut m = &zl * zl.transpose();
    let s2 = sigma * sigma;
    for j in 0..m.nrows() {
        m[(j, j)] += s2;
    }
    Ok(m)
}

/// Working matrix `P_i(gamma)` for one cluster.
pub fn working_matrix<T: Real>(
    structure: &CovarianceStructure,
    gamma: &DispersionParams<T>,
    cluster: &ClusterData<T>,
) -> Result<DMatrix<T>> {
    match &structure.kind {
        CorrelationKind::RandomEffects(design) => random_effects_cov(design, gamma, cluster),
        CorrelationKind::TwoPiece { column } => {
            let g = gamma.as_slice();
            if g.len() != 2 {
                return Err(Error::InvalidParams("two-piece structure expects 2 parameters".into()));
            }
            if *column >= cluster.p() {
                return Err(Error::InvalidStructure(format!("two-piece column {column} out of range")));
            }
            let diag = cluster.x().column(*column).map(|x| if x >= T::zero() { g[0] } else { g[1] });
            Ok(DMatrix::from_diagonal(&diag))
        }
        _ => build_correlation(structure, gamma, cluster.len()),
    }
}

fn param_blame(structure: &CovarianceStructure) -> String {
    match structure.kind {
        CorrelationKind::Independence => "scale".into(),
        CorrelationKind::Exchangeable | CorrelationKind::Ar1 => "rho".into(),
        CorrelationKind::Arma { .. } => "arma coefficients".into(),
        CorrelationKind::RandomEffects(_) => "random-effects covariance".into(),
        CorrelationKind::TwoPiece { .. } => "gamma".into(),
    }
}

/// Per-cluster weight pieces at `(beta, gamma)`.
#[derive(Clone, Debug)]
pub struct ClusterWeights<T: Real> {
    /// `W_i = Sigma_i^{-1}`.
    pub w: DMatrix<T>,
    /// `Sigma_i = A^{1/2} P A^{1/2}`.
    pub sigma: DMatrix<T>,
    /// `log det Sigma_i`.
    pub log_det: T,
}

/// `W_i(beta, gamma)` and `Sigma_i`, from a Cholesky factor of `P_i` (no explicit
/// inverse of `Sigma_i`).
pub fn cluster_weights<T: Real>(
    cluster: &ClusterData<T>,
    cluster_index: usize,
    family: &GlmFamily,
    beta: &DVector<T>,
    structure: &CovarianceStructure,
    gamma: &DispersionParams<T>,
) -> Result<ClusterWeights<T>> {
    let p_mat = working_matrix(structure, gamma, cluster)?;
    let chol = linalg::cholesky(&p_mat).ok_or_else(|| Error::NotPositiveDefinite { param: param_blame(structure) })?;
    let mut p_inv = chol.inverse();
    linalg::symmetrize(&mut p_inv);
    let log_det_p = chol.l().diagonal().iter().fold(T::zero(), |s, v| s + v.ln()) * T::two();

    if family.variance == crate::glm::VarianceFn::Constant {
        return Ok(ClusterWeights { w: p_inv, sigma: p_mat, log_det: log_det_p });
    }
    let a = variance_diag(cluster, family, beta, cluster_index)?;
    let sqrt_a = a.map(|v| v.sqrt());
    let n = a.len();
    let w = DMatrix::from_fn(n, n, |j, k| p_inv[(j, k)] / (sqrt_a[j] * sqrt_a[k]));
    let sigma = DMatrix::from_fn(n, n, |j, k| p_mat[(j, k)] * sqrt_a[j] * sqrt_a[k]);
    let log_det = log_det_p + a.iter().fold(T::zero(), |s, v| s + v.ln());
    Ok(ClusterWeights { w, sigma, log_det })
}

/// `W_i(beta, gamma) = A_i^{-1/2} P_i(gamma)^{-1} A_i^{-1/2}`.
pub fn weight_matrix<T: Real>(
    cluster: &ClusterData<T>,
    family: &GlmFamily,
    beta: &DVector<T>,
    structure: &CovarianceStructure,
    gamma: &DispersionParams<T>,
) -> Result<DMatrix<T>> {
    cluster_weights(cluster, 0, family, beta, structure, gamma).map(|cw| cw.w)
}
