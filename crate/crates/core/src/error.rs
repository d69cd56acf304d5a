use thiserror::Error;

/// Errors raised by the whitening library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {index} = {pivot:e})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("matrix is not symmetric (entry ({row}, {col}) differs from its transpose)")]
    NotSymmetric { row: usize, col: usize },

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("diagonal entry {index} of the whitener is not positive ({value:e})")]
    NonPositiveDiagonal { index: usize, value: f64 },

    #[error("insufficient history: need {needed} prior outcomes, have {available}")]
    InsufficientHistory { needed: usize, available: usize },

    #[error("second-moment matrix is singular: {0}")]
    SingularCovariance(String),

    #[error("invalid memory {memory}: must be at least the outcome dimension {n}")]
    InvalidMemory { memory: usize, n: usize },

    #[error("invalid half-life {0}: must be positive and finite")]
    InvalidHalfLife(f64),

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("stage `{0}` needs a time-ordered dataset (timestamps missing)")]
    MissingTimestamps(&'static str),

    #[error("feature values must lie in [-1, 1]; row {row}, column {col} has {value}")]
    FeatureOutOfBox { row: usize, col: usize, value: f64 },

    #[error("column `{0}` is constant; min-max scaling is undefined")]
    DegenerateColumn(String),

    #[error(
        "solver did not converge: {status} after {iterations} iterations (projected gradient {projected_gradient:e})"
    )]
    SolverFailure {
        status: String,
        iterations: usize,
        projected_gradient: f64,
    },

    #[error("line search failed to find a descent step at iteration {iteration}")]
    LineSearchFailure { iteration: usize },

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("recipe error at `{path}`: {message}")]
    Recipe { path: String, message: String },

    #[error("model version mismatch: file has {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("schema error: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// True for errors caused by bad input files, recipes or arguments,
    /// as opposed to numerical failures inside the library.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::SolverFailure { .. } | Error::LineSearchFailure { .. })
    }
}
