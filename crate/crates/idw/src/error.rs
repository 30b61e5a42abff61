use std::path::Path;

use thiserror::Error;

/// Failures of a CLI run, each tied to an exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("data error: {0}")]
    Data(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("specification error: {0}")]
    Spec(idw_core::Error),
    #[error("Gram matrix error: {0}")]
    Gram(idw_core::Error),
    #[error("solver error: {0}")]
    Solve(idw_core::Error),
    #[error("estimator error: {0}")]
    Estimate(idw_core::Error),
    #[error("output error: {0}")]
    Output(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Data(_) => 2,
            CliError::Config(_) => 3,
            CliError::Spec(_) => 4,
            CliError::Gram(_) => 5,
            CliError::Solve(_) => 6,
            CliError::Estimate(_) => 7,
            CliError::Output(_) => 8,
        }
    }

    pub fn output(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Output(format!("{}: {e}", path.display()))
    }
}

impl From<idw_core::Error> for CliError {
    fn from(e: idw_core::Error) -> Self {
        use idw_core::Error as E;
        match e {
            E::SingularGram { .. } | E::Singular(_) => CliError::Gram(e),
            E::NoConvergence { .. } | E::Denominator { .. } | E::NonConstantDesign => CliError::Solve(e),
            E::DivisionGuard { .. } | E::ExcludedWeight { .. } | E::AllTrimmed => CliError::Estimate(e),
            _ => CliError::Spec(e),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
