//! Simulation designs and Monte Carlo experiment runner (`f64` only).

pub mod dgp;
pub mod experiment;
pub mod normal;
pub mod rng;

pub use dgp::{
    arma_candidates, gen_binomial_copula, gen_linear_multilevel, gen_longitudinal_intro, DgpKind, DgpSpec, Latent,
};
pub use experiment::{
    dataset_digest, jackknife_calibration, run_mse_experiment, CalibrationReport, ExperimentSettings, MethodSpec,
    MseReport, MseRow, PairedDifference,
};
pub use normal::{sample_mvn, std_normal_cdf, MvnSampler};
pub use rng::replication_rng;
