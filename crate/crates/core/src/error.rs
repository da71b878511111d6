use thiserror::Error;

/// Unified error type for the whole library.
///
/// Variants are grouped by failure class so callers (the CLI in particular)
/// can map them onto exit codes: configuration problems, degenerate inputs,
/// and numerical breakdowns are distinct failures, not silent defaults.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix must be square, got {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("drift matrix is not Hurwitz: eigenvalue with real part {min_real:.6e} <= 0")]
    NotHurwitz { min_real: f64 },

    #[error("matrix is not symmetric: |M - M^T| = {asym:.3e} exceeds tolerance")]
    NotSymmetric { asym: f64 },

    #[error("matrix is not positive semidefinite: min eigenvalue {min_eig:.6e} (trace {trace:.6e})")]
    NotPsd { min_eig: f64, trace: f64 },

    #[error("covariance of conditioning variables {indices:?} is singular")]
    SingularConditioning { indices: Vec<usize> },

    #[error("covariance matrix is singular or indefinite in {context}")]
    SingularCovariance { context: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numerical failure in {context} (condition estimate {condition:.3e})")]
    Numerical { context: String, condition: f64 },

    #[error("trajectory {trajectory} diverged (non-finite state) at t = {time}")]
    Divergence { trajectory: usize, time: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("estimator failure: {0}")]
    Estimator(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
