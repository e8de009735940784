//! Adam with bias correction, and the learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one group of parameter tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, config: AdamConfig) -> Self {
        let sizes: Vec<usize> = params.into_iter().map(Tensor::numel).collect();
        Self {
            config,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn num_tensors(&self) -> usize {
        self.m.len()
    }

    /// One update `theta -= lr * m_hat / (sqrt(v_hat) + eps)`.
    ///
    /// Gradients are validated before anything is modified; a non-finite
    /// gradient leaves parameters and moments untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Config {
                field: "adam".into(),
                reason: format!(
                    "expected {} tensors, got {} params and {} grads",
                    self.m.len(),
                    params.len(),
                    grads.len()
                ),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.numel() != self.m[i].len() {
                return Err(Error::Config {
                    field: "adam".into(),
                    reason: format!("tensor {i}: param {:?} vs grad {:?}", p.shape(), g.shape()),
                });
            }
            if !g.is_finite() {
                return Err(Error::Diverged {
                    step: self.t as usize,
                    what: format!("non-finite gradient in tensor {i}"),
                });
            }
        }

        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((theta, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Constant `lr0` before `decay_start`, then linear decay reaching zero at `total_steps`.
pub fn lr_at(step: usize, lr0: f64, decay_start: usize, total_steps: usize) -> f64 {
    if step < decay_start {
        lr0
    } else if step >= total_steps {
        0.0
    } else {
        lr0 * (total_steps - step) as f64 / (total_steps - decay_start) as f64
    }
}

/// Chooses the decay start once reconstruction stops improving: every
/// `window` steps the median over the trailing window is compared with the
/// previous window's median, and decay begins when the relative improvement
/// falls below `min_improvement`.
#[derive(Debug, Clone)]
pub struct PlateauDetector {
    window: usize,
    min_improvement: f64,
    recent: Vec<f64>,
    previous_median: Option<f64>,
    triggered_at: Option<usize>,
}

impl PlateauDetector {
    pub fn new(window: usize, min_improvement: f64) -> Self {
        assert!(window > 0);
        Self {
            window,
            min_improvement,
            recent: Vec::with_capacity(window),
            previous_median: None,
            triggered_at: None,
        }
    }

    pub fn triggered_at(&self) -> Option<usize> {
        self.triggered_at
    }

    /// Feeds the loss observed at `step`; returns the decay start once known.
    pub fn observe(&mut self, step: usize, loss: f64) -> Option<usize> {
        if self.triggered_at.is_some() {
            return self.triggered_at;
        }
        self.recent.push(loss);
        if self.recent.len() == self.window {
            let mut sorted = std::mem::take(&mut self.recent);
            sorted.sort_by(f64::total_cmp);
            let median = sorted[sorted.len() / 2];
            if let Some(prev) = self.previous_median {
                if prev <= 0.0 || (prev - median) / prev < self.min_improvement {
                    self.triggered_at = Some(step + 1);
                }
            }
            self.previous_median = Some(median);
            self.recent = Vec::with_capacity(self.window);
        }
        self.triggered_at
    }
}
