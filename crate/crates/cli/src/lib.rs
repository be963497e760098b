//! Batch front-end: run configs, the staged pipeline, artifacts and sweeps.

pub mod artifacts;
pub mod config;
pub mod pipeline;
pub mod sweep;

use thiserror::Error;

pub use config::RunConfig;
pub use pipeline::{execute, RunOutcome, Stage};
pub use sweep::{sweep, SweepEntry};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("computation failed: {0}")]
    Compute(String),
    #[error("checks failed: {}", .0.join(", "))]
    Checks(Vec<String>),
}

impl CliError {
    /// Process exit code: 1 validation, 2 compute, 3 check failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Validation(_) => 1,
            Self::Compute(_) => 2,
            Self::Checks(_) => 3,
        }
    }
}
