use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("degenerate mean in cluster {cluster}, observation {obs}: v(mu) = {value:e}")]
    DegenerateMean { cluster: usize, obs: usize, value: f64 },

    #[error("working matrix is not positive definite (parameter {param})")]
    NotPositiveDefinite { param: String },

    #[error("ARMA coefficients are not stationary/invertible ({0})")]
    NonStationary(String),

    #[error("invalid covariance structure: {0}")]
    InvalidStructure(String),

    #[error("invalid dispersion parameters: {0}")]
    InvalidParams(String),

    #[error("singular normal matrix (condition estimate {condition:e})")]
    RankDeficient { condition: f64 },

    #[error("estimating equation did not converge after {iterations} iterations (score norm {score_norm:e})")]
    NoConvergence {
        iterations: usize,
        score_norm: f64,
        beta: Vec<f64>,
    },

    #[error("cluster {cluster} carries full leverage: leave-one-out update is singular")]
    FullLeverage { cluster: usize },

    #[error("too few clusters: have {have}, need at least {need}")]
    TooFewClusters { have: usize, need: usize },

    #[error("optimizer failed: {0}")]
    Optimizer(String),

    #[error("quadrature did not reach tolerance (value {value}, error estimate {error:e})")]
    Quadrature { value: f64, error: f64 },

    #[error("covariance matrix is not positive semi-definite")]
    NotPsd,

    #[error("simulation failure rate {rate:.3} exceeds 5%")]
    FailureRate { rate: f64 },

    #[error("no delta below {limit} reaches divergence ratio {eta}")]
    DeltaSearch { eta: f64, limit: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    /// True for failures of an iterative numerical procedure (as opposed to bad input).
    pub fn is_convergence(&self) -> bool {
        matches!(
            self,
            Error::NoConvergence { .. }
                | Error::Optimizer(_)
                | Error::FullLeverage { .. }
                | Error::RankDeficient { .. }
                | Error::Quadrature { .. }
                | Error::DeltaSearch { .. }
                | Error::FailureRate { .. }
        )
    }
}
