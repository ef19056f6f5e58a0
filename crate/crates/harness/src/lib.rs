//! Experiment runner for `bsde-core`.
//!
//! Each subcommand reads an [`ExperimentConfig`], runs its sweep and writes
//! CSV and JSON files into the output directory. Every file starts with a
//! provenance block (tool version, config hash, seed) so reruns can be
//! compared byte for byte.

pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;

pub use commands::{run, Command, Outcome, RunOptions};
pub use config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),

    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),

    #[error(transparent)]
    Core(#[from] bsde_core::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("thread pool: {0}")]
    Threads(String),
}

impl HarnessError {
    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        Self::Io(path.display().to_string(), e)
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub const TOOL: &str = env!("CARGO_PKG_NAME");
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Seed of the run at `steps` time steps.
pub fn run_seed(seed: u64, steps: usize) -> u64 {
    seed ^ steps as u64
}

/// Seed of the evaluation paths at `steps`, independent of the training paths.
pub fn evaluation_seed(seed: u64, steps: usize) -> u64 {
    run_seed(seed, steps) ^ (1 << 63)
}

/// Seed of the fine-grid reference when the config leaves it implicit.
pub fn reference_seed(seed: u64) -> u64 {
    seed ^ 0x5eed_f1e1_d4ef_0001
}

pub(crate) fn out_path(dir: &std::path::Path, name: &str) -> PathBuf {
    dir.join(name)
}
