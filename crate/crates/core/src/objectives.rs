//! Reconstruction and least-squares adversarial objectives, the two cycles,
//! and the discriminator history buffer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::nn::{BoundGenerators, BoundMlp};
use crate::{AutodiffError, Result};

pub const HISTORY_CAPACITY: usize = 50;

/// Coefficients of the reconstruction terms; the GAN terms have weight 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_v: f64,
    pub lambda_c: f64,
    pub lambda_r: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_v: 10.0,
            lambda_c: 10.0,
            lambda_r: 0.1,
        }
    }
}

/// Mean absolute difference over all elements.
pub fn l1(tape: &mut Tape, a: NodeId, b: NodeId) -> Result<NodeId> {
    let (sa, sb) = (tape.value(a)?.shape(), tape.value(b)?.shape());
    if sa != sb {
        return Err(AutodiffError::ShapeMismatch {
            op: "recon_loss",
            shapes: vec![sa.to_vec(), sb.to_vec()],
        }
        .into());
    }
    let d = tape.sub(a, b)?;
    let d = tape.abs(d)?;
    Ok(tape.mean(d)?)
}

/// `mean((s - target)^2)`.
fn mean_sq_to(tape: &mut Tape, scores: NodeId, target: f64) -> Result<NodeId> {
    let s = tape.value(scores)?;
    let t = tape.leaf(Tensor::full(s.shape(), target))?;
    let d = tape.sub(scores, t)?;
    let d = tape.square(d)?;
    Ok(tape.mean(d)?)
}

/// Generator-side least-squares loss: `mean((score - 1)^2)`.
pub fn lsgan_generator(tape: &mut Tape, fake_scores: NodeId) -> Result<NodeId> {
    mean_sq_to(tape, fake_scores, 1.0)
}

/// Adversary loss: `mean((real - 1)^2) + mean(fake^2)`.
pub fn lsgan_discriminator(tape: &mut Tape, real_scores: NodeId, fake_scores: NodeId) -> Result<NodeId> {
    let r = mean_sq_to(tape, real_scores, 1.0)?;
    let f = tape.square(fake_scores)?;
    let f = tape.mean(f)?;
    Ok(tape.add(r, f)?)
}

fn eval_scalar(f: impl FnOnce(&mut Tape) -> Result<NodeId>) -> Result<f64> {
    let mut tape = Tape::new();
    let out = f(&mut tape)?;
    Ok(tape.scalar(out)?)
}

pub fn recon_loss(a: &Tensor, b: &Tensor) -> Result<f64> {
    eval_scalar(|t| {
        let (a, b) = (t.leaf(a.clone())?, t.leaf(b.clone())?);
        l1(t, a, b)
    })
}

pub fn gan_gen_loss(scores: &Tensor) -> Result<f64> {
    eval_scalar(|t| {
        let s = t.leaf(scores.clone())?;
        lsgan_generator(t, s)
    })
}

pub fn gan_disc_loss(real_scores: &Tensor, fake_scores: &Tensor) -> Result<f64> {
    eval_scalar(|t| {
        let (r, f) = (t.leaf(real_scores.clone())?, t.leaf(fake_scores.clone())?);
        lsgan_discriminator(t, r, f)
    })
}

/// Nodes produced by one cycle's forward pass.
///
/// Cycle 1 fills `ell_v`; cycle 2 fills `ell_c` and `ell_r`.
#[derive(Debug, Clone, Copy)]
pub struct CycleOutputs {
    pub c_prime: NodeId,
    pub r_prime: NodeId,
    pub v_prime: NodeId,
    pub ell_v: Option<NodeId>,
    pub ell_c: Option<NodeId>,
    pub ell_r: Option<NodeId>,
    pub gan_term: NodeId,
    pub total: NodeId,
}

/// Scalar values of a [`CycleOutputs`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CycleLosses {
    pub ell_v: f64,
    pub ell_c: f64,
    pub ell_r: f64,
    pub gan_term: f64,
    pub total: f64,
}

impl CycleOutputs {
    pub fn losses(&self, tape: &Tape) -> Result<CycleLosses> {
        let get = |id: Option<NodeId>| -> Result<f64> { Ok(id.map(|i| tape.scalar(i)).transpose()?.unwrap_or(0.0)) };
        Ok(CycleLosses {
            ell_v: get(self.ell_v)?,
            ell_c: get(self.ell_c)?,
            ell_r: get(self.ell_r)?,
            gan_term: tape.scalar(self.gan_term)?,
            total: tape.scalar(self.total)?,
        })
    }
}

/// `v -> D -> (c', r') -> E -> v'`.
///
/// `total = lambda_v * ell_v + gan(A_C(c'))`. Only `c'` meets an adversary.
pub fn cycle1(
    tape: &mut Tape,
    gen: &BoundGenerators,
    a_c: &BoundMlp,
    weights: &LossWeights,
    v: NodeId,
) -> Result<CycleOutputs> {
    let (c_prime, r_prime) = gen.disentangle(tape, v)?;
    let v_prime = gen.entangle(tape, c_prime, r_prime)?;
    let ell_v = l1(tape, v, v_prime)?;
    let scores = a_c.forward(tape, c_prime, "a_c")?;
    let gan_term = lsgan_generator(tape, scores)?;
    let weighted = tape.scale(ell_v, weights.lambda_v)?;
    let total = tape.add(weighted, gan_term)?;
    Ok(CycleOutputs {
        c_prime,
        r_prime,
        v_prime,
        ell_v: Some(ell_v),
        ell_c: None,
        ell_r: None,
        gan_term,
        total,
    })
}

/// `(c, r) -> E -> v' -> D -> (c', r')`.
///
/// `r` must be a detached leaf. `total = (lambda_c * ell_c + lambda_r * ell_r)
/// + gan(A_V(v'))`. Only `v'` meets an adversary.
pub fn cycle2(
    tape: &mut Tape,
    gen: &BoundGenerators,
    a_v: &BoundMlp,
    weights: &LossWeights,
    c: NodeId,
    r: NodeId,
) -> Result<CycleOutputs> {
    let v_prime = gen.entangle(tape, c, r)?;
    let (c_prime, r_prime) = gen.disentangle(tape, v_prime)?;
    let ell_c = l1(tape, c, c_prime)?;
    let ell_r = l1(tape, r, r_prime)?;
    let scores = a_v.forward(tape, v_prime, "a_v")?;
    let gan_term = lsgan_generator(tape, scores)?;
    let wc = tape.scale(ell_c, weights.lambda_c)?;
    let wr = tape.scale(ell_r, weights.lambda_r)?;
    let recon = tape.add(wc, wr)?;
    let total = tape.add(recon, gan_term)?;
    Ok(CycleOutputs {
        c_prime,
        r_prime,
        v_prime,
        ell_v: None,
        ell_c: Some(ell_c),
        ell_r: Some(ell_r),
        gan_term,
        total,
    })
}

/// Pool of past generated samples for adversary updates.
///
/// Until full, every fresh sample is stored and returned. Once full, each
/// fresh sample is, with probability 1/2, swapped for a uniformly chosen
/// stored sample (which is returned instead); otherwise it is returned as is.
/// A capacity of zero disables the pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryBuffer {
    capacity: usize,
    stored: Vec<Vec<f64>>,
    rng: ChaCha8Rng,
}

impl HistoryBuffer {
    pub fn new(capacity: usize, rng: ChaCha8Rng) -> Self {
        Self {
            capacity,
            stored: Vec::with_capacity(capacity),
            rng,
        }
    }

    pub fn seeded(capacity: usize, seed: u64) -> Self {
        Self::new(capacity, ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn len(&self) -> usize {
        self.stored.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stored.is_empty()
    }

    /// Stored rows, in slot order.
    pub fn samples(&self) -> &[Vec<f64>] {
        &self.stored
    }

    /// Batch of samples for the adversary, one row per fresh row.
    pub fn draw(&mut self, fresh: &Tensor) -> Tensor {
        if self.capacity == 0 {
            return fresh.clone();
        }
        let cols = fresh.cols();
        let mut out = Vec::with_capacity(fresh.numel());
        for i in 0..fresh.rows() {
            let sample = fresh.row(i);
            if self.stored.len() < self.capacity {
                self.stored.push(sample.to_vec());
                out.extend_from_slice(sample);
            } else if self.rng.random_bool(0.5) {
                let j = self.rng.random_range(0..self.capacity);
                let old = std::mem::replace(&mut self.stored[j], sample.to_vec());
                out.extend(old);
            } else {
                out.extend_from_slice(sample);
            }
        }
        Tensor::from_rows(fresh.rows(), cols, out)
    }
}
