//! Training steps and the experiment loop.
//!
//! Both modes share the forward computation of each cycle and differ only in
//! which parameters receive updates:
//!
//! - **Uncooperative**: cycle 1 updates `D` only (`E` is read but frozen),
//!   then cycle 2 updates `E` only (`D` frozen). Each network learns solely
//!   from steps where its own input is real.
//! - **Cooperative**: the two cycle totals are summed and `D` and `E` are
//!   updated together from the joint gradient.
//!
//! In both modes the adversaries are then updated once from that step's
//! fakes, routed through the history buffers.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::data::{Dataset, TrainPool, TrainingPools};
use crate::eval::{eval_disentanglement, MetricsRecord};
use crate::nn::{init_params, BoundDiscriminators, DiscriminatorSet, DisentanglerKind, GeneratorSet, DEFAULT_HIDDEN};
use crate::objectives::{
    cycle1, cycle2, lsgan_discriminator, CycleLosses, HistoryBuffer, LossWeights, HISTORY_CAPACITY,
};
use crate::optim::{lr_at, AdamConfig, AdamState, PlateauDetector};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Uncooperative,
    Cooperative,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Uncooperative => "uncooperative",
            Mode::Cooperative => "cooperative",
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uncooperative" => Ok(Mode::Uncooperative),
            "cooperative" => Ok(Mode::Cooperative),
            other => Err(Error::Config {
                field: "mode".into(),
                reason: format!("unknown mode `{other}` (expected uncooperative or cooperative)"),
            }),
        }
    }
}

/// How the cooperative mode steps `D` and `E`. Adam is elementwise, so the
/// two choices give identical updates; both are kept for checking that.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoopOptimizer {
    /// `opt_D` and `opt_E` stepped on the same joint gradient.
    #[default]
    Separate,
    /// One Adam state over `D` and `E` together.
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub total_steps: usize,
    pub batch: usize,
    pub lr0: f64,
    /// First step of the linear decay; ignored when `plateau_decay` is set.
    pub decay_start: usize,
    /// Start the decay once the reconstruction median stops improving.
    pub plateau_decay: bool,
    pub eval_every: usize,
    pub seed: u64,
    pub buffer_enabled: bool,
    pub buffer_capacity: usize,
    pub weights: LossWeights,
    pub hidden: usize,
    pub disentangler: DisentanglerKind,
    pub coop_optimizer: CoopOptimizer,
    pub adam: AdamConfig,
    /// Steps between checkpoints handed to the observer; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Uncooperative,
            total_steps: 60_000,
            batch: 128,
            lr0: 0.0002,
            decay_start: 30_000,
            plateau_decay: false,
            eval_every: 500,
            seed: 0,
            buffer_enabled: true,
            buffer_capacity: HISTORY_CAPACITY,
            weights: LossWeights::default(),
            hidden: DEFAULT_HIDDEN,
            disentangler: DisentanglerKind::Split,
            coop_optimizer: CoopOptimizer::Separate,
            adam: AdamConfig::default(),
            checkpoint_every: 0,
        }
    }
}

pub const PLATEAU_WINDOW: usize = 1000;
pub const PLATEAU_MIN_IMPROVEMENT: f64 = 0.01;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, reason: String| {
            Err(Error::Config {
                field: field.into(),
                reason,
            })
        };
        if self.total_steps == 0 {
            return fail("total_steps", "must be at least 1".into());
        }
        if self.decay_start > self.total_steps {
            return fail(
                "decay_start",
                format!("{} exceeds total_steps {}", self.decay_start, self.total_steps),
            );
        }
        if self.batch == 0 {
            return fail("batch", "must be at least 1".into());
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return fail("lr0", format!("must be a non-negative number, got {}", self.lr0));
        }
        if self.eval_every == 0 {
            return fail("eval_every", "must be at least 1".into());
        }
        if self.hidden == 0 {
            return fail("hidden", "must be at least 1".into());
        }
        let w = &self.weights;
        for (f, x) in [
            ("lambda_v", w.lambda_v),
            ("lambda_c", w.lambda_c),
            ("lambda_r", w.lambda_r),
        ] {
            if !(x >= 0.0 && x.is_finite()) {
                return fail(f, format!("must be non-negative, got {x}"));
            }
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return fail("adam", "betas must be in [0, 1) and eps positive".into());
        }
        Ok(())
    }
}

/// Point in a training step after which observers are called.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Uncooperative: after the cycle-1 update of `D`.
    Cycle1,
    /// Uncooperative: after the cycle-2 update of `E`.
    Cycle2,
    /// Cooperative: after the joint `D` + `E` update.
    Joint,
    /// After the adversary update.
    Adversaries,
}

/// The three optimizers. `de` replaces `d` and `e` for [`CoopOptimizer::Shared`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerTriple {
    pub d: AdamState,
    pub e: AdamState,
    pub a: AdamState,
    pub de: Option<AdamState>,
}

/// Random streams owned by one run. The dataset uses stream 0 of the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngStreams {
    pub batches: ChaCha8Rng,
    pub buffer_c: ChaCha8Rng,
    pub buffer_v: ChaCha8Rng,
}

pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const INIT_STREAM: u64 = 1;
const BATCH_STREAM: u64 = 2;
const BUFFER_C_STREAM: u64 = 3;
const BUFFER_V_STREAM: u64 = 4;

/// Complete mutable state of one experiment.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    pub gen: GeneratorSet,
    pub disc: DiscriminatorSet,
    opts: OptimizerTriple,
    buf_c: HistoryBuffer,
    buf_v: HistoryBuffer,
    batch_rng: ChaCha8Rng,
    step: usize,
    plateau: Option<PlateauDetector>,
}

impl Trainer {
    /// Seeded initialization for `dims` taken from the pools.
    pub fn new(cfg: TrainConfig, pools: &TrainingPools) -> Result<Self> {
        cfg.validate()?;
        let dims = pools.spec().dims;
        let (gen, disc) = init_params(dims, cfg.hidden, cfg.disentangler, &mut stream(cfg.seed, INIT_STREAM));
        Ok(Self::from_parts(cfg, gen, disc))
    }

    /// Fresh optimizers, buffers and streams around the given networks.
    pub fn from_parts(cfg: TrainConfig, gen: GeneratorSet, disc: DiscriminatorSet) -> Self {
        let opts = OptimizerTriple {
            d: AdamState::new(gen.d_params(), cfg.adam),
            e: AdamState::new(gen.e_params(), cfg.adam),
            a: AdamState::new(disc.params(), cfg.adam),
            de: (cfg.mode == Mode::Cooperative && cfg.coop_optimizer == CoopOptimizer::Shared)
                .then(|| AdamState::new(gen.d_params().into_iter().chain(gen.e_params()), cfg.adam)),
        };
        let capacity = if cfg.buffer_enabled { cfg.buffer_capacity } else { 0 };
        Self {
            buf_c: HistoryBuffer::new(capacity, stream(cfg.seed, BUFFER_C_STREAM)),
            buf_v: HistoryBuffer::new(capacity, stream(cfg.seed, BUFFER_V_STREAM)),
            batch_rng: stream(cfg.seed, BATCH_STREAM),
            plateau: cfg
                .plateau_decay
                .then(|| PlateauDetector::new(PLATEAU_WINDOW, PLATEAU_MIN_IMPROVEMENT)),
            step: 0,
            opts,
            gen,
            disc,
            cfg,
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Number of completed steps.
    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn optimizers(&self) -> &OptimizerTriple {
        &self.opts
    }

    pub fn rng_streams(&self) -> RngStreams {
        RngStreams {
            batches: self.batch_rng.clone(),
            buffer_c: self.buf_c.rng().clone(),
            buffer_v: self.buf_v.rng().clone(),
        }
    }

    pub fn buffers(&self) -> (&HistoryBuffer, &HistoryBuffer) {
        (&self.buf_c, &self.buf_v)
    }

    /// Rebuilds a trainer from saved state. The plateau detector restarts.
    pub fn restore(
        cfg: TrainConfig,
        gen: GeneratorSet,
        disc: DiscriminatorSet,
        opts: OptimizerTriple,
        streams: RngStreams,
        buffers: (HistoryBuffer, HistoryBuffer),
        step: usize,
    ) -> Self {
        let mut t = Self::from_parts(cfg, gen, disc);
        t.opts = opts;
        t.batch_rng = streams.batches;
        t.buf_c = buffers.0;
        t.buf_v = buffers.1;
        t.step = step;
        t
    }

    /// Effective start of the linear decay.
    pub fn decay_start(&self) -> usize {
        match &self.plateau {
            Some(p) => p.triggered_at().unwrap_or(self.cfg.total_steps),
            None => self.cfg.decay_start,
        }
    }

    /// Learning rate for the next update.
    pub fn current_lr(&self) -> f64 {
        lr_at(self.step, self.cfg.lr0, self.decay_start(), self.cfg.total_steps)
    }

    pub fn step(&mut self, pools: &TrainingPools) -> Result<MetricsRecord> {
        self.step_observed(pools, &mut |_, _, _| {})
    }

    /// One training step; `hook` runs after every parameter update.
    pub fn step_observed(
        &mut self,
        pools: &TrainingPools,
        hook: &mut dyn FnMut(Phase, &GeneratorSet, &DiscriminatorSet),
    ) -> Result<MetricsRecord> {
        let step = self.step + 1;
        let rec = match self.cfg.mode {
            Mode::Uncooperative => self.step_uncooperative(pools, hook),
            Mode::Cooperative => self.step_cooperative(pools, hook),
        }
        .map_err(|e| match e {
            Error::Autodiff(AutodiffError::NonFinite { op }) => Error::Diverged {
                step,
                what: format!("non-finite value in {op}"),
            },
            Error::Diverged { what, .. } => Error::Diverged { step, what },
            other => other,
        })?;
        self.step = step;
        if let Some(p) = &mut self.plateau {
            p.observe(step - 1, rec.recon(&self.cfg.weights));
        }
        Ok(rec)
    }

    fn draw_batches(&mut self, pools: &TrainingPools) -> Result<(Tensor, Tensor, Tensor)> {
        let b = self.cfg.batch;
        let v = pools.sample(TrainPool::V, b, &mut self.batch_rng)?;
        let c = pools.sample(TrainPool::C, b, &mut self.batch_rng)?;
        let v_for_r = pools.sample(TrainPool::V, b, &mut self.batch_rng)?;
        Ok((v, c, v_for_r))
    }

    fn step_uncooperative(
        &mut self,
        pools: &TrainingPools,
        hook: &mut dyn FnMut(Phase, &GeneratorSet, &DiscriminatorSet),
    ) -> Result<MetricsRecord> {
        let lr = self.current_lr();
        let w = self.cfg.weights;
        let (v, c, v_for_r) = self.draw_batches(pools)?;

        // Cycle 1: D sees real v. E participates but is not updated.
        let (l1, fake_c) = {
            let mut tape = Tape::new();
            let bg = self.gen.bind(&mut tape)?;
            let ac = self.disc.a_c.bind(&mut tape)?;
            let vi = tape.leaf(v.clone())?;
            let out = cycle1(&mut tape, &bg, &ac, &w, vi)?;
            let grads = tape.backward(out.total)?;
            let gd = bg.d_grads(&grads, &self.gen);
            self.opts.d.step(&mut self.gen.d_params_mut(), &gd, lr)?;
            (out.losses(&tape)?, tape.value(out.c_prime)?.clone())
        };
        hook(Phase::Cycle1, &self.gen, &self.disc);

        // Cycle 2: E sees real c and a detached r. D participates but is not updated.
        let (l2, fake_v) = {
            let (_, r) = self.gen.disentangle(&v_for_r)?;
            let mut tape = Tape::new();
            let bg = self.gen.bind(&mut tape)?;
            let av = self.disc.a_v.bind(&mut tape)?;
            let ci = tape.leaf(c.clone())?;
            let ri = tape.leaf(r)?;
            let out = cycle2(&mut tape, &bg, &av, &w, ci, ri)?;
            let grads = tape.backward(out.total)?;
            let ge = bg.e_grads(&grads, &self.gen);
            self.opts.e.step(&mut self.gen.e_params_mut(), &ge, lr)?;
            (out.losses(&tape)?, tape.value(out.v_prime)?.clone())
        };
        hook(Phase::Cycle2, &self.gen, &self.disc);

        let (loss_ac, loss_av) = self.update_adversaries(&c, &fake_c, &v, &fake_v, lr)?;
        hook(Phase::Adversaries, &self.gen, &self.disc);
        Ok(self.record(l1, l2, loss_ac, loss_av, lr))
    }

    fn step_cooperative(
        &mut self,
        pools: &TrainingPools,
        hook: &mut dyn FnMut(Phase, &GeneratorSet, &DiscriminatorSet),
    ) -> Result<MetricsRecord> {
        let lr = self.current_lr();
        let w = self.cfg.weights;
        let (v, c, v_for_r) = self.draw_batches(pools)?;

        let (_, r) = self.gen.disentangle(&v_for_r)?;
        let mut tape = Tape::new();
        let bg = self.gen.bind(&mut tape)?;
        let ac = self.disc.a_c.bind(&mut tape)?;
        let av = self.disc.a_v.bind(&mut tape)?;
        let vi = tape.leaf(v.clone())?;
        let ci = tape.leaf(c.clone())?;
        let ri = tape.leaf(r)?;
        let o1 = cycle1(&mut tape, &bg, &ac, &w, vi)?;
        let o2 = cycle2(&mut tape, &bg, &av, &w, ci, ri)?;
        let total = tape.add(o1.total, o2.total)?;
        let grads = tape.backward(total)?;
        let gd = bg.d_grads(&grads, &self.gen);
        let ge = bg.e_grads(&grads, &self.gen);
        match &mut self.opts.de {
            Some(shared) => {
                let mut params = self.gen.generator_params_mut();
                let all: Vec<Tensor> = gd.into_iter().chain(ge).collect();
                shared.step(&mut params, &all, lr)?;
            }
            None => {
                self.opts.d.step(&mut self.gen.d_params_mut(), &gd, lr)?;
                self.opts.e.step(&mut self.gen.e_params_mut(), &ge, lr)?;
            }
        }
        let (l1, l2) = (o1.losses(&tape)?, o2.losses(&tape)?);
        let fake_c = tape.value(o1.c_prime)?.clone();
        let fake_v = tape.value(o2.v_prime)?.clone();
        hook(Phase::Joint, &self.gen, &self.disc);

        let (loss_ac, loss_av) = self.update_adversaries(&c, &fake_c, &v, &fake_v, lr)?;
        hook(Phase::Adversaries, &self.gen, &self.disc);
        Ok(self.record(l1, l2, loss_ac, loss_av, lr))
    }

    /// Least-squares update of `A_C` on (real `c`, buffered `c'`) and `A_V`
    /// on (real `v`, buffered `v'`).
    fn update_adversaries(
        &mut self,
        real_c: &Tensor,
        fake_c: &Tensor,
        real_v: &Tensor,
        fake_v: &Tensor,
        lr: f64,
    ) -> Result<(f64, f64)> {
        let fake_c = self.buf_c.draw(fake_c);
        let fake_v = self.buf_v.draw(fake_v);
        let mut tape = Tape::new();
        let bd = BoundDiscriminators::bind(&self.disc, &mut tape)?;
        let (rc, fc) = (tape.leaf(real_c.clone())?, tape.leaf(fake_c)?);
        let (rv, fv) = (tape.leaf(real_v.clone())?, tape.leaf(fake_v)?);
        let src = bd.a_c.forward(&mut tape, rc, "a_c")?;
        let sfc = bd.a_c.forward(&mut tape, fc, "a_c")?;
        let srv = bd.a_v.forward(&mut tape, rv, "a_v")?;
        let sfv = bd.a_v.forward(&mut tape, fv, "a_v")?;
        let lac = lsgan_discriminator(&mut tape, src, sfc)?;
        let lav = lsgan_discriminator(&mut tape, srv, sfv)?;
        let total = tape.add(lac, lav)?;
        let grads = tape.backward(total)?;
        let g = bd.grads(&grads, &self.disc);
        self.opts.a.step(&mut self.disc.params_mut(), &g, lr)?;
        Ok((tape.scalar(lac)?, tape.scalar(lav)?))
    }

    fn record(&self, l1: CycleLosses, l2: CycleLosses, loss_ac: f64, loss_av: f64, lr: f64) -> MetricsRecord {
        MetricsRecord {
            step: self.step + 1,
            ell_v: l1.ell_v,
            ell_c: l2.ell_c,
            ell_r: l2.ell_r,
            gan_g1: l1.gan_term,
            gan_g2: l2.gan_term,
            loss_ac,
            loss_av,
            lr,
            rho: None,
        }
    }
}

/// Receives run progress. All methods default to no-ops.
pub trait RunObserver {
    fn on_record(&mut self, _record: &MetricsRecord) -> Result<()> {
        Ok(())
    }

    /// Called every `checkpoint_every` steps and after the last step.
    fn on_checkpoint(&mut self, _trainer: &Trainer) -> Result<()> {
        Ok(())
    }
}

impl RunObserver for () {}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub gen: GeneratorSet,
    pub disc: DiscriminatorSet,
    pub history: Vec<MetricsRecord>,
    /// |ρ| at the last completed step, if it could be evaluated.
    pub final_rho: Option<f64>,
    pub steps_completed: usize,
    /// Set when training stopped on a non-finite value.
    pub diverged: Option<String>,
    /// Evaluations that failed (e.g. a collapsed residual), by step.
    pub eval_failures: Vec<(usize, String)>,
}

/// Trains for `cfg.total_steps` steps, evaluating |ρ| on the holdout every
/// `eval_every` steps and at the final step.
pub fn run_experiment(cfg: &TrainConfig, dataset: &Dataset, observer: &mut dyn RunObserver) -> Result<RunResult> {
    let trainer = Trainer::new(cfg.clone(), dataset.training())?;
    continue_experiment(trainer, dataset, observer)
}

/// Runs `trainer` from its current step to `total_steps`.
pub fn continue_experiment(
    mut trainer: Trainer,
    dataset: &Dataset,
    observer: &mut dyn RunObserver,
) -> Result<RunResult> {
    let cfg = trainer.config().clone();
    let mut history = Vec::with_capacity(cfg.total_steps - trainer.step_count().min(cfg.total_steps));
    let mut diverged = None;
    let mut eval_failures = Vec::new();
    let mut final_rho = None;

    while trainer.step_count() < cfg.total_steps {
        let mut rec = match trainer.step(dataset.training()) {
            Ok(r) => r,
            Err(Error::Diverged { step, what }) => {
                diverged = Some(format!("step {step}: {what}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let step = rec.step;
        if step % cfg.eval_every == 0 || step == cfg.total_steps {
            match eval_disentanglement(&trainer.gen, dataset.holdout()) {
                Ok(rho) => rec.rho = Some(rho),
                Err(e) => eval_failures.push((step, e.to_string())),
            }
        }
        observer.on_record(&rec)?;
        history.push(rec);
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != cfg.total_steps {
            observer.on_checkpoint(&trainer)?;
        }
    }
    observer.on_checkpoint(&trainer)?;

    if let Some(last) = history.last() {
        final_rho = match last.rho {
            Some(r) => Some(r),
            None => eval_disentanglement(&trainer.gen, dataset.holdout()).ok(),
        };
    }
    Ok(RunResult {
        steps_completed: trainer.step_count(),
        gen: trainer.gen,
        disc: trainer.disc,
        history,
        final_rho,
        diverged,
        eval_failures,
    })
}
