//! Staged experiment pipeline behind the `opesel` binary:
//! `gen → sample → cache → select / sweep → report`.
//!
//! Every stage validates the configuration first, then checks that the
//! outputs of the stages it depends on were produced from the same inputs
//! (by content hash) before doing any work.

pub mod config;
pub mod stages;

pub use config::RunConfig;
pub use stages::{run_select, run_stage, run_sweep, Options, Stage, SweepKind};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("sanity check failed: {0}")]
    Sanity(String),
    #[error("stale or mismatched input: {0}")]
    Stale(String),
    #[error(transparent)]
    Core(#[from] opesel_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Sanity(_) => 3,
            CliError::Stale(_) => 4,
            CliError::Core(opesel_core::Error::HashMismatch { .. } | opesel_core::Error::Corrupt { .. }) => 4,
            _ => 1,
        }
    }
}
