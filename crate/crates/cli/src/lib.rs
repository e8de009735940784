//! Experiment front-end for `reentangle`: configuration, run directories,
//! metrics files, SVG plots and the two-mode comparison harness.
//!
//! Each run directory holds:
//!
//! - `manifest.json`: resolved configuration, seed, timestamps, build id and
//!   output paths. Written before training starts.
//! - `config.toml`: the resolved configuration as a config file.
//! - `metrics.csv`: one row per step, flushed as training proceeds.
//! - `summary.json`: final `|ρ|`, losses, wall time and any probe reports.
//! - `checkpoint.json`: full training state at the last step.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod metrics;
pub mod plot;
pub mod runner;

use std::path::PathBuf;

use thiserror::Error;

/// Environment variable naming the directory under which runs are created.
pub const OUT_ROOT_ENV: &str = "REENTANGLE_OUT";
pub const DEFAULT_OUT_ROOT: &str = "runs";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("assertion failed: {0}")]
    Assertion(String),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    /// 0 success, 1 configuration (and other) errors, 2 divergence, 3 failed assertion.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Other(_) => 1,
            CliError::Diverged(_) => 2,
            CliError::Assertion(_) => 3,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.into())
    }
}

impl From<reentangle::Error> for CliError {
    fn from(e: reentangle::Error) -> Self {
        match e {
            reentangle::Error::Config { field, reason } => CliError::Config(format!("{field}: {reason}")),
            reentangle::Error::Checkpoint(m) => CliError::Config(format!("checkpoint: {m}")),
            reentangle::Error::Diverged { step, what } => CliError::Diverged(format!("step {step}: {what}")),
            other => CliError::Other(other.into()),
        }
    }
}

/// `explicit` if given, otherwise `$REENTANGLE_OUT/<name>` (or `runs/<name>`).
pub fn output_dir(explicit: Option<PathBuf>, name: &str) -> PathBuf {
    explicit.unwrap_or_else(|| {
        let root = std::env::var_os(OUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT));
        root.join(name)
    })
}
