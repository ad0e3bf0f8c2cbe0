#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Staged pipelines over `dfu-core`: train, unlearn, retrain, verify and sweep.
//!
//! Each stage reads the previous stage's files from the run directory and
//! stamps everything it writes with the hash of the resolved configuration.

pub mod artifacts;
pub mod config;
pub mod pipeline;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("bound violation: {0}")]
    BoundViolation(String),
    #[error("protocol failure: {0}")]
    Protocol(String),
    #[error(transparent)]
    Core(#[from] dfu_core::Error),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed json in {path}: {source}")]
    Json { path: String, source: serde_json::Error },
}

impl CliError {
    /// Process exit status: 2 config, 3 bound violation, 4 protocol or runtime failure.
    pub fn exit_code(&self) -> i32 {
        use dfu_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::BoundViolation(_) => 3,
            CliError::Core(
                E::InvalidParameter(_)
                | E::Parse { .. }
                | E::DimensionMismatch { .. }
                | E::CapacityExceeded { .. }
                | E::EmptyTarget(_)
                | E::MixingAssumption { .. }
                | E::Disconnected { .. },
            ) => 2,
            _ => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
