//! Versioned JSON checkpoints.
//!
//! Layout (`version` 1):
//!
//! ```text
//! {
//!   "format": "reentangle-checkpoint",
//!   "version": 1,
//!   "seed": u64, "step": usize,
//!   "dims": { "dim_c": usize, "dim_r": usize },
//!   "hidden": usize,
//!   "config": TrainConfig | null,
//!   "generators": { "dims", "d": {"split": {"d_c", "d_r"}} | {"joint": mlp}, "e": mlp },
//!   "discriminators": { "a_c": mlp, "a_v": mlp } | null,
//!   "training": { "optimizers", "streams", "buffer_c", "buffer_v" } | null
//! }
//! ```
//!
//! An `mlp` is `{ "w1", "b1", "w2", "b2": {"shape": [..], "data": [..]}, "activation" }`
//! with row-major data. Floats are written in shortest round-trip form, so a
//! save/load cycle is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::nn::{Dims, DiscriminatorSet, Disentangler, GeneratorSet, Mlp};
use crate::objectives::HistoryBuffer;
use crate::optim::AdamState;
use crate::train::{OptimizerTriple, RngStreams, TrainConfig, Trainer};
use crate::{Error, Result};

pub const FORMAT: &str = "reentangle-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingState {
    pub optimizers: OptimizerTriple,
    pub streams: RngStreams,
    pub buffer_c: HistoryBuffer,
    pub buffer_v: HistoryBuffer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub step: usize,
    pub dims: Dims,
    pub hidden: usize,
    pub config: Option<TrainConfig>,
    pub generators: GeneratorSet,
    pub discriminators: Option<DiscriminatorSet>,
    pub training: Option<TrainingState>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn check_mlp(name: &str, m: &Mlp, input: usize, output: usize) -> Result<()> {
    let [w1, b1, w2, b2] = m.params().map(Clone::clone);
    Mlp::from_parts(w1, b1, w2, b2, m.activation()).map_err(|e| bad(format!("{name}: {e}")))?;
    if m.input_dim() != input || m.output_dim() != output {
        return Err(bad(format!(
            "{name}: expected {input}->{output}, found {}->{}",
            m.input_dim(),
            m.output_dim()
        )));
    }
    Ok(())
}

fn check_adam(name: &str, s: &AdamState, n: usize) -> Result<()> {
    if s.num_tensors() != n {
        return Err(bad(format!(
            "{name}: expected {n} moment tensors, found {}",
            s.num_tensors()
        )));
    }
    Ok(())
}

impl Checkpoint {
    /// Generators only, e.g. for probing hand-built networks.
    pub fn generators_only(gen: GeneratorSet, seed: u64, step: usize) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            seed,
            step,
            dims: gen.dims,
            hidden: gen.e.hidden_dim(),
            config: None,
            generators: gen,
            discriminators: None,
            training: None,
        }
    }

    /// Full state of a trainer; restoring it continues the run bit-exactly.
    pub fn from_trainer(trainer: &Trainer) -> Self {
        let cfg = trainer.config().clone();
        let (bc, bv) = trainer.buffers();
        Self {
            format: FORMAT.into(),
            version: VERSION,
            seed: cfg.seed,
            step: trainer.step_count(),
            dims: trainer.gen.dims,
            hidden: cfg.hidden,
            generators: trainer.gen.clone(),
            discriminators: Some(trainer.disc.clone()),
            training: Some(TrainingState {
                optimizers: trainer.optimizers().clone(),
                streams: trainer.rng_streams(),
                buffer_c: bc.clone(),
                buffer_v: bv.clone(),
            }),
            config: Some(cfg),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != FORMAT {
            return Err(bad(format!("unknown format `{}`", self.format)));
        }
        if self.version != VERSION {
            return Err(bad(format!("unsupported version {}", self.version)));
        }
        let dims = Dims::new(self.dims.dim_c, self.dims.dim_r).map_err(|e| bad(e.to_string()))?;
        let g = &self.generators;
        if g.dims != dims {
            return Err(bad("generator dims differ from checkpoint dims"));
        }
        let (dc, dr, dv) = (dims.dim_c, dims.dim_r, dims.dim_v());
        match &g.d {
            Disentangler::Split { d_c, d_r } => {
                check_mlp("d_c", d_c, dv, dc)?;
                check_mlp("d_r", d_r, dv, dr)?;
            }
            Disentangler::Joint(m) => check_mlp("d", m, dv, dv)?,
        }
        check_mlp("e", &g.e, dv, dv)?;
        if let Some(disc) = &self.discriminators {
            check_mlp("a_c", &disc.a_c, dc, 1)?;
            check_mlp("a_v", &disc.a_v, dv, 1)?;
        }
        if let Some(t) = &self.training {
            if self.discriminators.is_none() || self.config.is_none() {
                return Err(bad("training state requires discriminators and config"));
            }
            let nd = g.d_params().len();
            check_adam("optimizers.d", &t.optimizers.d, nd)?;
            check_adam("optimizers.e", &t.optimizers.e, 4)?;
            check_adam("optimizers.a", &t.optimizers.a, 8)?;
            if let Some(de) = &t.optimizers.de {
                check_adam("optimizers.de", de, nd + 4)?;
            }
        }
        Ok(())
    }

    /// Checks that the networks fit the given data dimensions.
    pub fn expect_dims(&self, dims: Dims) -> Result<()> {
        if self.dims != dims {
            return Err(bad(format!(
                "checkpoint dims (C={}, R={}) do not match data dims (C={}, R={})",
                self.dims.dim_c, self.dims.dim_r, dims.dim_c, dims.dim_r
            )));
        }
        Ok(())
    }

    /// Rebuilds a trainer that continues exactly where this checkpoint left off.
    pub fn into_trainer(self) -> Result<Trainer> {
        self.validate()?;
        let (Some(cfg), Some(disc), Some(t)) = (self.config, self.discriminators, self.training) else {
            return Err(bad("checkpoint holds no training state"));
        };
        Ok(Trainer::restore(
            cfg,
            self.generators,
            disc,
            t.optimizers,
            t.streams,
            (t.buffer_c, t.buffer_v),
            self.step,
        ))
    }

    pub fn to_writer<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer(w, self).map_err(|e| bad(e.to_string()))
    }

    pub fn from_reader<R: std::io::Read>(r: R) -> Result<Self> {
        let ck: Self = serde_json::from_reader(r).map_err(|e| bad(e.to_string()))?;
        ck.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.to_writer(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        Self::from_reader(BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::DisentanglerKind;

    #[test]
    fn generators_round_trip() {
        let gen = GeneratorSet::exact_inverse(Dims::default(), 8, DisentanglerKind::Split);
        let ck = Checkpoint::generators_only(gen, 3, 0);
        let mut buf = Vec::new();
        ck.to_writer(&mut buf).unwrap();
        let back = Checkpoint::from_reader(&buf[..]).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn rejects_wrong_version_and_dims() {
        let gen = GeneratorSet::exact_inverse(Dims::default(), 8, DisentanglerKind::Split);
        let mut ck = Checkpoint::generators_only(gen, 3, 0);
        ck.version = 99;
        assert!(ck.validate().is_err());
        ck.version = VERSION;
        ck.dims = Dims { dim_c: 2, dim_r: 1 };
        assert!(ck.validate().is_err());
        ck.dims = Dims::default();
        assert!(ck.expect_dims(Dims { dim_c: 1, dim_r: 2 }).is_err());
        assert!(ck.into_trainer().is_err());
    }

    #[test]
    fn malformed_json_is_an_error() {
        assert!(Checkpoint::from_reader(&b"{\"format\": 1}"[..]).is_err());
    }
}
