use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Mixing matrix whose non-leading spectrum reaches the unit circle.
    #[error("mixing matrix violates rho < 1 (rho = {rho})")]
    MixingAssumption { rho: f64 },

    #[error("graph is not connected after {attempts} attempts")]
    Disconnected { attempts: usize },

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("training diverged at round {round}: model norm {norm:e}")]
    Diverged { round: usize, norm: f64 },

    #[error("matrix not positive definite after ridge escalation (smallest eigenvalue ~ {min_eigenvalue:e})")]
    Factorization { min_eigenvalue: f64 },

    #[error("deletion capacity exceeded: {requested} samples requested, capacity {capacity}")]
    CapacityExceeded { requested: usize, capacity: usize },

    #[error("empty deletion target: {0}")]
    EmptyTarget(String),

    #[error("client {client} would retain no samples; use client removal instead")]
    EmptyRetained { client: usize },

    #[error("statistics not collected for client {0}")]
    MissingStatistics(usize),

    #[error("protocol failure: {0}")]
    Protocol(String),

    #[error("reference optimization did not converge (gradient norm {grad_norm:e})")]
    NonConvergent { grad_norm: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
