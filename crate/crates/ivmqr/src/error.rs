use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("point lies outside the reference domain")]
    DomainViolation,
    #[error("unsupported domain: {0}")]
    UnsupportedDomain(String),
    #[error("potential is not convex: {0}")]
    NotConvex(String),
    #[error("matrix is singular or not invertible")]
    SingularMatrix,
    #[error("no preimage inside the domain for the requested point")]
    NoPreimage,
    #[error("iteration did not converge: {0}")]
    NoConvergence(String),
    #[error("invalid cycle: {0}")]
    InvalidCycle(String),
    #[error("invalid probability shares: {0}")]
    InvalidShares(String),
    #[error("coupling does not admit closed-form conditional laws")]
    UnsupportedCoupling,
    #[error("no cells exceed the support threshold")]
    EmptySupport,
    #[error("invalid mixing matrix: {0}")]
    InvalidMixing(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
