//! Run configuration: a `key = value` file (TOML syntax) plus overrides.
//!
//! Every key is optional; unspecified keys take the defaults below.
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `mode` | `"uncooperative"` | `uncooperative` or `cooperative` |
//! | `total_steps` | 60000 | training steps |
//! | `batch` | 128 | batch size |
//! | `lr` | 0.0002 | initial learning rate |
//! | `decay_start` | `total_steps / 2` | first step of the linear decay |
//! | `plateau_decay` | false | start the decay when `L_recon` plateaus |
//! | `eval_every` | 500 | steps between `|ρ|` evaluations |
//! | `seed` | 0 | dataset, initialization and sampling seed |
//! | `buffer` | true | use the discriminator history buffers |
//! | `buffer_capacity` | 50 | history buffer size |
//! | `lambda_v`, `lambda_c`, `lambda_r` | 10, 10, 0.1 | reconstruction weights |
//! | `hidden` | 32 | hidden units per network |
//! | `disentangler` | `"split"` | `split` (two nets) or `joint` |
//! | `coop_optimizer` | `"separate"` | `separate` or `shared` Adam in cooperative mode |
//! | `beta1`, `beta2`, `adam_eps` | 0.5, 0.999, 1e-8 | Adam constants |
//! | `checkpoint_every` | 0 | intermediate checkpoints (0: final only) |
//! | `dim_c`, `dim_r` | 1, 1 | latent widths |
//! | `mu_c`, `sigma_c`, `mu_r`, `sigma_r` | 2, 1, -2, 1 | factor distributions |
//! | `pool_c`, `pool_v`, `holdout` | 10000, 10000, 2048 | dataset sizes |
//! | `on_the_fly` | false | draw fresh training samples instead of using pools |

use std::path::Path;

use reentangle::data::{DomainSpec, DEFAULT_HOLDOUT, DEFAULT_POOL};
use reentangle::nn::{Dims, DisentanglerKind};
use reentangle::objectives::LossWeights;
use reentangle::optim::AdamConfig;
use reentangle::train::{CoopOptimizer, Mode, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Flat view of every configurable key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub total_steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub decay_start: Option<usize>,
    pub plateau_decay: bool,
    pub eval_every: usize,
    pub seed: u64,
    pub buffer: bool,
    pub buffer_capacity: usize,
    pub lambda_v: f64,
    pub lambda_c: f64,
    pub lambda_r: f64,
    pub hidden: usize,
    pub disentangler: DisentanglerKind,
    pub coop_optimizer: CoopOptimizer,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub checkpoint_every: usize,
    pub dim_c: usize,
    pub dim_r: usize,
    pub mu_c: f64,
    pub sigma_c: f64,
    pub mu_r: f64,
    pub sigma_r: f64,
    pub pool_c: usize,
    pub pool_v: usize,
    pub holdout: usize,
    pub on_the_fly: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let d = DomainSpec::default();
        Self {
            mode: t.mode,
            total_steps: t.total_steps,
            batch: t.batch,
            lr: t.lr0,
            decay_start: None,
            plateau_decay: t.plateau_decay,
            eval_every: t.eval_every,
            seed: t.seed,
            buffer: t.buffer_enabled,
            buffer_capacity: t.buffer_capacity,
            lambda_v: t.weights.lambda_v,
            lambda_c: t.weights.lambda_c,
            lambda_r: t.weights.lambda_r,
            hidden: t.hidden,
            disentangler: t.disentangler,
            coop_optimizer: t.coop_optimizer,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            adam_eps: t.adam.eps,
            checkpoint_every: t.checkpoint_every,
            dim_c: d.dims.dim_c,
            dim_r: d.dims.dim_r,
            mu_c: d.mu_c,
            sigma_c: d.sigma_c,
            mu_r: d.mu_r,
            sigma_r: d.sigma_r,
            pool_c: DEFAULT_POOL,
            pool_v: DEFAULT_POOL,
            holdout: DEFAULT_HOLDOUT,
            on_the_fly: false,
        }
    }
}

fn field_error(field: &str, reason: impl Into<String>) -> CliError {
    CliError::Config(format!("{field}: {}", reason.into()))
}

impl RunConfig {
    /// Reads `path` (if any) and applies `key=value` overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
                parse_table(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (key, value) = parse_override(o)?;
            table.insert(key, value);
        }
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self, CliError> {
        let cfg: Self = match toml::Value::Table(table.clone()).try_into() {
            Ok(cfg) => cfg,
            Err(e) => return Err(blame_key(&table, e)),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Renders the configuration as a config file that reproduces it.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            mode: self.mode,
            total_steps: self.total_steps,
            batch: self.batch,
            lr0: self.lr,
            decay_start: self.decay_start.unwrap_or(self.total_steps / 2),
            plateau_decay: self.plateau_decay,
            eval_every: self.eval_every,
            seed: self.seed,
            buffer_enabled: self.buffer,
            buffer_capacity: self.buffer_capacity,
            weights: self.weights(),
            hidden: self.hidden,
            disentangler: self.disentangler,
            coop_optimizer: self.coop_optimizer,
            adam: AdamConfig {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
            },
            checkpoint_every: self.checkpoint_every,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_v: self.lambda_v,
            lambda_c: self.lambda_c,
            lambda_r: self.lambda_r,
        }
    }

    pub fn dims(&self) -> Dims {
        Dims {
            dim_c: self.dim_c,
            dim_r: self.dim_r,
        }
    }

    pub fn domain(&self) -> DomainSpec {
        DomainSpec {
            dims: self.dims(),
            mu_c: self.mu_c,
            sigma_c: self.sigma_c,
            mu_r: self.mu_r,
            sigma_r: self.sigma_r,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        for (field, n) in [("pool_c", self.pool_c), ("pool_v", self.pool_v)] {
            if n == 0 {
                return Err(field_error(field, "must be at least 1"));
            }
        }
        if self.seed > i64::MAX as u64 {
            return Err(field_error("seed", format!("must not exceed {}", i64::MAX)));
        }
        if self.holdout < 2 {
            return Err(field_error("holdout", "must be at least 2"));
        }
        if self.dim_c == 0 {
            return Err(field_error("dim_c", "must be at least 1"));
        }
        if self.dim_r == 0 {
            return Err(field_error("dim_r", "must be at least 1"));
        }
        if self.dim_c + self.dim_r > 16 {
            return Err(field_error("dim_r", "dim_c + dim_r must not exceed 16"));
        }
        if self.batch > self.pool_c.min(self.pool_v) && !self.on_the_fly {
            return Err(field_error("batch", format!("{} exceeds the smaller pool", self.batch)));
        }
        self.domain().validate().map_err(core_config_error)?;
        self.train_config().validate().map_err(core_config_error)?;
        Ok(())
    }
}

fn core_config_error(e: reentangle::Error) -> CliError {
    match e {
        reentangle::Error::Config { field, reason } => field_error(&field, reason),
        other => CliError::Config(other.to_string()),
    }
}

/// Names the first key that fails to deserialize on its own.
fn blame_key(table: &toml::Table, whole: toml::de::Error) -> CliError {
    for (key, value) in table {
        let single = toml::Table::from_iter([(key.clone(), value.clone())]);
        if let Err(e) = toml::Value::Table(single).try_into::<RunConfig>() {
            return field_error(key, e.message());
        }
    }
    CliError::Config(whole.message().to_string())
}

fn parse_table(text: &str) -> Result<toml::Table, String> {
    text.parse::<toml::Table>().map_err(|e| e.message().to_string())
}

/// `key=value`; the value is read as a TOML value, falling back to a bare string.
pub fn parse_override(s: &str) -> Result<(String, toml::Value), CliError> {
    let Some((key, value)) = s.split_once('=') else {
        return Err(CliError::Config(format!("override `{s}` is not key=value")));
    };
    let (key, value) = (key.trim(), value.trim());
    if key.is_empty() {
        return Err(CliError::Config(format!("override `{s}` has an empty key")));
    }
    let parsed = parse_table(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((key.to_string(), parsed))
}
