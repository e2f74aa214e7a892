use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("convergence failure: {0}")]
    Convergence(String),

    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl CliError {
    /// 2 config, 3 convergence, 4 data (unreadable input counts as data).
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Convergence(_) => 3,
            CliError::Data(_) | CliError::Io { .. } => 4,
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }
}

impl From<sandreg::Error> for CliError {
    fn from(e: sandreg::Error) -> Self {
        use sandreg::Error as E;
        if e.is_convergence() || matches!(e, E::NotPsd) {
            return CliError::Convergence(e.to_string());
        }
        match e {
            E::InvalidData(_) | E::DegenerateMean { .. } | E::TooFewClusters { .. } | E::NotPositiveDefinite { .. } => {
                CliError::Data(e.to_string())
            }
            _ => CliError::Config(e.to_string()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn library_errors_map_to_exit_codes() {
        assert_eq!(CliError::from(sandreg::Error::InvalidData("x".into())).exit_code(), 4);
        assert_eq!(CliError::from(sandreg::Error::Optimizer("x".into())).exit_code(), 3);
        assert_eq!(CliError::from(sandreg::Error::FailureRate { rate: 0.1 }).exit_code(), 3);
        assert_eq!(CliError::from(sandreg::Error::InvalidStructure("x".into())).exit_code(), 2);
    }
}
