use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not symmetric positive semidefinite: {0}")]
    NotPsd(String),

    #[error("invalid decomposition: {0}")]
    InvalidDecomposition(String),

    #[error("zero factor: {0}")]
    ZeroFactor(String),

    #[error("rank-one positivity fails: {0}")]
    NotRankOnePositive(String),

    #[error("subspace constructions disagree by {distance:e}: {what}")]
    SubspaceDisagreement { what: String, distance: f64 },

    #[error("optimizer failure: {0}")]
    Optimizer(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid step schedule: {0}")]
    Schedule(String),

    #[error("invalid test function: {0}")]
    TestFunction(String),

    #[error("zero-set oracle cannot supply a point: {0}")]
    Oracle(String),

    #[error("right-hand side is not Sigma-valued: off-range norm {off_range:e} exceeds {tolerance:e}")]
    NotSigmaValued { off_range: f64, tolerance: f64 },

    #[error("discrete operator is numerically singular (condition estimate {condition:e})")]
    Singular { condition: f64 },

    #[error("iteration did not converge: {0}")]
    NonConvergence(String),

    #[error("regularised solutions are not Cauchy in epsilon: differences {0:?}")]
    NotCauchy(Vec<f64>),

    #[error("certificate not verified: {0}")]
    Certificate(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
