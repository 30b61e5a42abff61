use alloc::string::String;
use alloc::vec::Vec;

/// Failures surfaced by the library. Solver outcomes such as "no implicit
/// design" are statuses, not errors.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("singular Gram matrix: smallest eigenvalue {min_eigenvalue:e} below cutoff {cutoff:e}")]
    SingularGram { min_eigenvalue: f64, cutoff: f64 },
    #[error("singular matrix: {0}")]
    Singular(String),
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("missing required option `{0}`")]
    MissingOption(String),
    #[error("unknown covariate column `{0}`")]
    UnknownColumn(String),
    #[error("fixed point did not converge after {iterations} iterations (last step {last_step:e})")]
    NoConvergence { iterations: usize, last_step: f64 },
    #[error("denominator {value:e} too close to zero at unit {unit}")]
    Denominator { unit: usize, value: f64 },
    #[error("design is not constant across units")]
    NonConstantDesign,
    #[error("propensity below guard for units with nonzero weight: {units:?}")]
    DivisionGuard { units: Vec<usize> },
    #[error("nonzero weight on excluded units: {units:?}")]
    ExcludedWeight { units: Vec<usize> },
    #[error("every unit was trimmed")]
    AllTrimmed,
}

pub type Result<T> = core::result::Result<T, Error>;
