//! Disentangler/entangler networks trained with adversarial priors and
//! cycle reconstruction, under either cooperative or uncooperative
//! optimization, on synthetic data with known latent factors.
//!
//! The crate is organized bottom-up:
//!
//! - [`autodiff`]: tensors and a reverse-mode tape.
//! - [`nn`]: the four small MLPs (`D` as two streams, `E`, `A_C`, `A_V`).
//! - [`objectives`]: least-squares GAN losses, L1 reconstruction, both
//!   cycles and the discriminator history buffer.
//! - [`optim`]: Adam and the learning-rate schedule.
//! - [`train`]: the two training-step procedures and the experiment loop.
//! - [`data`]: synthetic unpaired pools with hidden ground truth.
//! - [`eval`]: Pearson-based disentanglement score and the mismatch probe.
//! - [`netcheck`]: finite-difference checks of every network shape.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod netcheck;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod train;

pub use autodiff::{AutodiffError, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{net}: expected input width {expected}, got {got}")]
    Width {
        net: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("batch sizes differ: {left} vs {right}")]
    BatchMismatch { left: usize, right: usize },
    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
