//! Data-generating processes for the simulation studies.

use std::fmt;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::normal::{std_normal_cdf, MvnSampler};
use crate::error::{Error, Result};
use crate::glm::{ClusterData, ClusterDataset, GlmFamily, Link};
use crate::working_cov::{arma_autocorrelation, CovarianceStructure, ScaleMode};

/// Group size of the multilevel linear design.
pub const LINEAR_GROUP_SIZE: usize = 4;
/// Group size of the binary copula designs.
pub const BINOMIAL_GROUP_SIZE: usize = 20;
/// Group size of the long-panel design.
pub const LONGITUDINAL_GROUP_SIZE: usize = 50;

/// Latent ARMA(2,2) coefficients of the binary design.
pub const ARMA22_AR: [f64; 2] = [0.4, 0.5];
pub const ARMA22_MA: [f64; 2] = [-0.9, 0.4];

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Latent {
    /// Latent correlation 0.6 between every pair.
    Equicorr,
    /// Latent ARMA(2,2) autocorrelation along the group.
    Arma22,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DgpKind {
    /// Gaussian groups of size 4 with heteroscedasticity strength `lambda`.
    LinearMultilevel { lambda: f64 },
    BinomialCopula(Latent),
    LongitudinalIntro,
}

impl fmt::Display for DgpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DgpKind::LinearMultilevel { lambda } => write!(f, "linear_multilevel(lambda={lambda})"),
            DgpKind::BinomialCopula(Latent::Equicorr) => f.write_str("binomial_equicorr"),
            DgpKind::BinomialCopula(Latent::Arma22) => f.write_str("binomial_arma22"),
            DgpKind::LongitudinalIntro => f.write_str("longitudinal_intro"),
        }
    }
}

/// A generator together with its cluster count and true coefficient (`p = 1`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DgpSpec {
    pub kind: DgpKind,
    pub clusters: usize,
    pub beta_true: f64,
}

impl DgpSpec {
    pub fn new(kind: DgpKind, clusters: usize) -> Result<Self> {
        let spec = Self { kind, clusters, beta_true: 1.0 };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 {
            return Err(Error::InvalidArgument("need at least one cluster".into()));
        }
        if !self.beta_true.is_finite() {
            return Err(Error::InvalidArgument("beta_true must be finite".into()));
        }
        if let DgpKind::LinearMultilevel { lambda } = self.kind {
            if !(lambda >= 0.0 && lambda.is_finite()) {
                return Err(Error::InvalidArgument(format!("lambda must be finite and >= 0, got {lambda}")));
            }
        }
        Ok(())
    }

    pub fn family(&self) -> GlmFamily {
        match self.kind {
            DgpKind::BinomialCopula(_) => GlmFamily::binomial(),
            _ => GlmFamily::gaussian(),
        }
    }

    pub fn group_size(&self) -> usize {
        match self.kind {
            DgpKind::LinearMultilevel { .. } => LINEAR_GROUP_SIZE,
            DgpKind::BinomialCopula(_) => BINOMIAL_GROUP_SIZE,
            DgpKind::LongitudinalIntro => LONGITUDINAL_GROUP_SIZE,
        }
    }

    pub fn generate<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ClusterDataset<f64>> {
        self.validate()?;
        match self.kind {
            DgpKind::LinearMultilevel { lambda } => linear_multilevel(lambda, self.clusters, self.beta_true, rng),
            DgpKind::BinomialCopula(latent) => binomial_copula(latent, self.clusters, self.beta_true, rng),
            DgpKind::LongitudinalIntro => longitudinal(self.clusters, self.beta_true, rng),
        }
    }
}

/// `sigma(x) = 1 + lambda exp(-2 x^2)`.
pub fn linear_sd(lambda: f64, x: f64) -> f64 {
    1.0 + lambda * (-2.0 * x * x).exp()
}

/// Conditional covariance `rho_jk sigma(x_j) sigma(x_k)` with `rho = 0.5` off the diagonal.
pub fn linear_conditional_cov(lambda: f64, x: &[f64]) -> DMatrix<f64> {
    let s: Vec<f64> = x.iter().map(|&v| linear_sd(lambda, v)).collect();
    DMatrix::from_fn(x.len(), x.len(), |j, k| if j == k { s[j] * s[j] } else { 0.5 * s[j] * s[k] })
}

/// Draws `y ~ N(x beta, Sigma(x))` for one multilevel group.
pub fn linear_response<R: Rng + ?Sized>(lambda: f64, x: &[f64], beta: f64, rng: &mut R) -> Result<DVector<f64>> {
    let mean = DVector::from_iterator(x.len(), x.iter().map(|v| v * beta));
    Ok(MvnSampler::new(mean, &linear_conditional_cov(lambda, x))?.sample(rng))
}

fn column(x: Vec<f64>) -> DMatrix<f64> {
    DMatrix::from_vec(x.len(), 1, x)
}

fn linear_multilevel<R: Rng + ?Sized>(lambda: f64, clusters: usize, beta: f64, rng: &mut R) -> Result<ClusterDataset<f64>> {
    let mut out = Vec::with_capacity(clusters);
    for _ in 0..clusters {
        let x: Vec<f64> = (0..LINEAR_GROUP_SIZE).map(|_| rng.sample(StandardNormal)).collect();
        let y = linear_response(lambda, &x, beta, rng)?;
        out.push(ClusterData::new(y, column(x))?);
    }
    ClusterDataset::new(out)
}

/// Multilevel linear design: four standard normal covariates per group and
/// `y | x ~ N(x, Sigma(x))`.
pub fn gen_linear_multilevel<R: Rng + ?Sized>(lambda: f64, clusters: usize, rng: &mut R) -> Result<ClusterDataset<f64>> {
    DgpSpec::new(DgpKind::LinearMultilevel { lambda }, clusters)?.generate(rng)
}

/// `a J + (1 - a) I`.
pub fn equicorrelation(n: usize, a: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |j, k| if j == k { 1.0 } else { a })
}

/// Symmetric Toeplitz matrix with first row `acf`.
pub fn toeplitz(acf: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(acf.len(), acf.len(), |j, k| acf[j.abs_diff(k)])
}

/// Latent correlation matrix of the binary design.
pub fn latent_correlation(latent: Latent) -> Result<DMatrix<f64>> {
    Ok(match latent {
        Latent::Equicorr => equicorrelation(BINOMIAL_GROUP_SIZE, 0.6),
        Latent::Arma22 => toeplitz(&arma_autocorrelation(&ARMA22_AR, &ARMA22_MA, BINOMIAL_GROUP_SIZE - 1)?),
    })
}

fn samplers(latent: Latent) -> Result<(&'static MvnSampler, &'static MvnSampler)> {
    static X: OnceLock<MvnSampler> = OnceLock::new();
    static EQ: OnceLock<std::result::Result<MvnSampler, Error>> = OnceLock::new();
    static ARMA: OnceLock<std::result::Result<MvnSampler, Error>> = OnceLock::new();
    let n = BINOMIAL_GROUP_SIZE;
    let x = X.get_or_init(|| MvnSampler::new(DVector::zeros(n), &equicorrelation(n, 0.5)).expect("equicorrelation is PD"));
    let cell = match latent {
        Latent::Equicorr => &EQ,
        Latent::Arma22 => &ARMA,
    };
    let z = cell.get_or_init(|| MvnSampler::new(DVector::zeros(n), &latent_correlation(latent)?));
    z.as_ref().map(|z| (x, z)).map_err(Clone::clone)
}

fn binomial_copula<R: Rng + ?Sized>(latent: Latent, clusters: usize, beta: f64, rng: &mut R) -> Result<ClusterDataset<f64>> {
    let (xs, zs) = samplers(latent)?;
    let mut out = Vec::with_capacity(clusters);
    for _ in 0..clusters {
        let x = xs.sample(rng);
        let z = zs.sample(rng);
        let y = DVector::from_fn(x.len(), |j, _| {
            let p = Link::Logit.inverse(x[j] * beta);
            if std_normal_cdf(z[j]) >= 1.0 - p {
                1.0
            } else {
                0.0
            }
        });
        out.push(ClusterData::new(y, column(x.as_slice().to_vec()))?);
    }
    ClusterDataset::new(out)
}

/// Correlated binary groups of size 20 through a Gaussian copula:
/// `y_ij = 1{Phi(z_ij) >= 1 - expit(x_ij)}`.
pub fn gen_binomial_copula<R: Rng + ?Sized>(latent: Latent, clusters: usize, rng: &mut R) -> Result<ClusterDataset<f64>> {
    DgpSpec::new(DgpKind::BinomialCopula(latent), clusters)?.generate(rng)
}

/// Residual correlation of the long-panel design.
pub fn omega(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |j, k| {
        if j == k {
            1.0
        } else {
            let d = j.abs_diff(k) as f64;
            (-0.5 * d.powf(0.25)).exp() + 0.25 * d.cos() * (-d / 20.0).exp()
        }
    })
}

fn longitudinal_samplers() -> (&'static MvnSampler, &'static MvnSampler) {
    static S: OnceLock<(MvnSampler, MvnSampler)> = OnceLock::new();
    let s = S.get_or_init(|| {
        let n = LONGITUDINAL_GROUP_SIZE;
        let om = omega(n);
        assert!(om.clone().cholesky().is_some(), "residual correlation must be positive definite");
        (
            MvnSampler::new(DVector::zeros(n), &equicorrelation(n, 0.9)).expect("equicorrelation is PD"),
            MvnSampler::new(DVector::zeros(n), &om).expect("checked above"),
        )
    });
    (&s.0, &s.1)
}

fn longitudinal<R: Rng + ?Sized>(clusters: usize, beta: f64, rng: &mut R) -> Result<ClusterDataset<f64>> {
    let (xs, es) = longitudinal_samplers();
    let mut out = Vec::with_capacity(clusters);
    for _ in 0..clusters {
        let x = xs.sample(rng);
        let y = &x * beta + es.sample(rng);
        out.push(ClusterData::new(y, column(x.as_slice().to_vec()))?);
    }
    ClusterDataset::new(out)
}

/// Long-panel design: groups of 50 with strongly correlated covariates and
/// residual correlation [`omega`].
pub fn gen_longitudinal_intro<R: Rng + ?Sized>(clusters: usize, rng: &mut R) -> Result<ClusterDataset<f64>> {
    DgpSpec::new(DgpKind::LongitudinalIntro, clusters)?.generate(rng)
}

/// ARMA(p, q) working structures with `p` in {1, 2} and `q` in {0, 1, 2}.
pub fn arma_candidates(scale: ScaleMode) -> Vec<(String, CovarianceStructure)> {
    let mut out = Vec::new();
    for p in 1..=2 {
        for q in 0..=2 {
            let s = CovarianceStructure::arma(p, q, scale).expect("orders are valid");
            out.push((format!("arma({p},{q})"), s));
        }
    }
    out
}

/// Gaussian AIC `q + N log(2 pi) + 2 (dim gamma + p)`, with `q` the EQML objective.
pub fn gaussian_aic(
    dataset: &ClusterDataset<f64>,
    structure: &CovarianceStructure,
    gamma: &crate::working_cov::DispersionParams<f64>,
    beta: &DVector<f64>,
) -> Result<f64> {
    let q = crate::dispersion::eqml_objective(dataset, &GlmFamily::gaussian(), structure, gamma, beta)?;
    let n = dataset.n_total() as f64;
    Ok(q + n * (2.0 * std::f64::consts::PI).ln() + 2.0 * (structure.dim() + dataset.p()) as f64)
}
