//! Sandwich regression for semiparametric multilevel generalized linear models.
//!
//! The fixed effects `beta` are estimated by quasi-likelihood estimating equations
//! weighted by a parametric working covariance `Sigma_i(gamma)`. Instead of fitting
//! `gamma` by pseudo-likelihood (EQML) or moment matching (GEE), sandwich regression
//! picks `gamma` to minimize a leave-one-cluster-out (approximate jackknife) estimate
//! of `Var(c' beta_hat)`, which stays meaningful when the working covariance is wrong.
//!
//! All numerical code is generic over [`Real`] (`f64` and `f32`); the aliases below
//! fix the scalar to `f64`.
//!
//! ```
//! use sandreg::sim::{replication_rng, DgpKind, DgpSpec};
//! use sandreg::{jackknife_variance, minimize_dispersion, CovarianceStructure, DispersionObjective, GlmFamily,
//!     OptimizerSettings, ScaleMode, TargetContrast};
//!
//! let spec = DgpSpec::new(DgpKind::LinearMultilevel { lambda: 3.0 }, 40).unwrap();
//! let data = spec.generate(&mut replication_rng(1, 0, 0)).unwrap();
//! let family = GlmFamily::gaussian();
//! let target = TargetContrast::coordinate(1, 0).unwrap();
//! let objective = DispersionObjective::sandwich(target.clone());
//! let structure = CovarianceStructure::exchangeable(ScaleMode::Free);
//! let fit = minimize_dispersion(&data, &family, &structure, &objective, &OptimizerSettings::default()).unwrap();
//! let var = jackknife_variance(&fit, &data, &family, &objective, 1).unwrap();
//! assert!(var.variance(&target) > 0.0);
//! ```

// `!(x > 0)` comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod counterexample;
pub mod dispersion;
pub mod error;
pub mod glm;
pub mod inference;
mod linalg;
pub mod nelder_mead;
pub mod qml;
pub mod sandwich;
pub mod scalar;
pub mod sim;
pub mod working_cov;

pub use error::{Error, Result};
pub use scalar::Real;

pub use dispersion::{minimize_dispersion, DispersionObjective, ObjectiveKind, OptimizerSettings};
pub use glm::{GlmFamily, Link, VarianceFn};
pub use inference::{delta_method_variance, jackknife_variance, select_model};
pub use working_cov::{CorrelationKind, CovarianceStructure, RandomEffectsDesign, ScaleMode};

pub type ClusterData = glm::ClusterData<f64>;
pub type ClusterDataset = glm::ClusterDataset<f64>;
pub type TargetContrast = glm::TargetContrast<f64>;
pub type DispersionParams = working_cov::DispersionParams<f64>;
pub type UnconstrainedParams = working_cov::UnconstrainedParams<f64>;
pub type QmlSolution = qml::QmlSolution<f64>;
pub type LossValue = sandwich::LossValue<f64>;
pub type SandregFit = dispersion::SandregFit<f64>;
pub type VarianceEstimate = inference::VarianceEstimate<f64>;
