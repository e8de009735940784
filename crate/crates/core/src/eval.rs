//! Disentanglement accuracy (|Pearson ρ| against the true residual) and the
//! mismatched-decoding probe.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{Holdout, TrainPool, TrainingPools};
use crate::nn::GeneratorSet;
use crate::{Error, Result};

/// Per-step training record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub ell_v: f64,
    pub ell_c: f64,
    pub ell_r: f64,
    /// Generator-side GAN term of cycle 1 (on `c'`).
    pub gan_g1: f64,
    /// Generator-side GAN term of cycle 2 (on `v'`).
    pub gan_g2: f64,
    pub loss_ac: f64,
    pub loss_av: f64,
    pub lr: f64,
    pub rho: Option<f64>,
}

impl MetricsRecord {
    /// Weighted reconstruction objective `lambda_v ell_v + lambda_c ell_c + lambda_r ell_r`.
    pub fn recon(&self, w: &crate::objectives::LossWeights) -> f64 {
        w.lambda_v * self.ell_v + w.lambda_c * self.ell_c + w.lambda_r * self.ell_r
    }
}

/// `|cov(x, y) / (std(x) std(y))|`.
///
/// Fails when the lengths differ, fewer than two points are given, or either
/// input is constant.
pub fn pearson_abs(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::UndefinedMetric(format!(
            "pearson needs equal lengths >= 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric("zero variance input".into()));
    }
    let rho = (sxy / (sxx.sqrt() * syy.sqrt())).abs();
    Ok(rho.min(1.0))
}

/// Mean |ρ| between the columns of `truth` and `recovered` under the best
/// one-to-one column matching (exhaustive over subsets; widths up to ~16).
pub fn matched_correlation(truth: &Tensor, recovered: &Tensor) -> Result<f64> {
    let k = truth.cols();
    if recovered.cols() != k {
        return Err(Error::UndefinedMetric(format!(
            "cannot match {k} true columns against {} recovered",
            recovered.cols()
        )));
    }
    let mut corr = vec![vec![0.0; k]; k];
    for (i, row) in corr.iter_mut().enumerate() {
        let t = truth.column_values(i);
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = pearson_abs(&t, &recovered.column_values(j))?;
        }
    }
    if k == 1 {
        return Ok(corr[0][0]);
    }
    // best[mask] = max total over assignments of the first popcount(mask) true
    // columns to the recovered columns in mask
    let mut best = vec![f64::NEG_INFINITY; 1 << k];
    best[0] = 0.0;
    for mask in 0..(1usize << k) {
        if best[mask] == f64::NEG_INFINITY {
            continue;
        }
        let i = mask.count_ones() as usize;
        if i == k {
            continue;
        }
        for (j, &c) in corr[i].iter().enumerate() {
            if mask & (1 << j) == 0 {
                let next = mask | (1 << j);
                best[next] = best[next].max(best[mask] + c);
            }
        }
    }
    Ok(best[(1 << k) - 1] / k as f64)
}

/// |ρ| between the held-out residuals and those recovered by `D`.
pub fn eval_disentanglement(gen: &GeneratorSet, holdout: &Holdout) -> Result<f64> {
    if holdout.len() < 2 {
        return Err(Error::UndefinedMetric("holdout needs at least two samples".into()));
    }
    let (_, r_prime) = gen.disentangle(&holdout.v)?;
    matched_correlation(&holdout.r_true, &r_prime).map_err(|e| match e {
        Error::UndefinedMetric(m) => Error::UndefinedMetric(format!("recovered residual is degenerate ({m})")),
        other => other,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Mean `|c'' - c_i|` over all probes and coordinates.
    pub mean_c_error: f64,
    /// Mean per-coordinate `|ρ(r'', r_j)|`.
    pub r_corr: f64,
    pub n: usize,
}

/// Entangles content and residual taken from unrelated samples, then
/// disentangles the composite and measures what comes back.
///
/// `c_i` comes from the `C` pool and `r_j = D_r(v_j)` from an independent
/// `V` sample; `(c'', r'') = D(E(c_i, r_j))`.
pub fn mismatch_probe(gen: &GeneratorSet, pools: &TrainingPools, n: usize, rng: &mut impl Rng) -> Result<ProbeReport> {
    if n < 2 {
        return Err(Error::Config {
            field: "n".into(),
            reason: "probe needs at least two samples".into(),
        });
    }
    let c_i = pools.sample(TrainPool::C, n, rng)?;
    let v_j = pools.sample(TrainPool::V, n, rng)?;
    let (_, r_j) = gen.disentangle(&v_j)?;
    let composite = gen.entangle(&c_i, &r_j)?;
    let (c2, r2) = gen.disentangle(&composite)?;
    let mean_c_error = c2
        .data()
        .iter()
        .zip(c_i.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / c2.numel() as f64;
    let k = r_j.cols();
    let mut r_corr = 0.0;
    for j in 0..k {
        r_corr += pearson_abs(&r2.column_values(j), &r_j.column_values(j))?;
    }
    Ok(ProbeReport {
        mean_c_error,
        r_corr: r_corr / k as f64,
        n,
    })
}
