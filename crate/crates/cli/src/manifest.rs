use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputPaths {
    pub metrics: PathBuf,
    pub summary: PathBuf,
    pub checkpoint: PathBuf,
    pub config: PathBuf,
}

impl OutputPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            metrics: dir.join(METRICS_FILE),
            summary: dir.join(SUMMARY_FILE),
            checkpoint: dir.join(CHECKPOINT_FILE),
            config: dir.join(CONFIG_FILE),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub build: String,
    pub seed: u64,
    pub config: RunConfig,
    pub started: String,
    pub finished: Option<String>,
    pub outputs: OutputPaths,
}

/// Package version plus the source revision when it was known at build time.
pub fn build_id() -> String {
    match option_env!("REENTANGLE_GIT_REV") {
        Some(rev) if !rev.is_empty() => format!("{} ({rev})", env!("CARGO_PKG_VERSION")),
        _ => env!("CARGO_PKG_VERSION").to_string(),
    }
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn new(config: &RunConfig, dir: &Path) -> Self {
        Self {
            tool: "reentangle".into(),
            build: build_id(),
            seed: config.seed,
            config: config.clone(),
            started: now(),
            finished: None,
            outputs: OutputPaths::in_dir(dir),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).map_err(anyhow::Error::from)?;
        fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}
