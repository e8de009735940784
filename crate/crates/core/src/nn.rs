//! One-hidden-layer MLPs for the disentangler `D`, entangler `E` and the
//! adversaries `A_C`, `A_V`.

use std::hash::{DefaultHasher, Hash, Hasher};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradStore, NodeId, Tape, Tensor};
use crate::{Error, Result};

pub const DEFAULT_HIDDEN: usize = 32;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
}

/// Widths of the content (`C`) and residual (`R`) factors. `V` is their
/// concatenation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub dim_c: usize,
    pub dim_r: usize,
}

impl Dims {
    pub fn new(dim_c: usize, dim_r: usize) -> Result<Self> {
        if dim_c == 0 || dim_r == 0 {
            return Err(Error::Config {
                field: "dims".into(),
                reason: "dimensions must be positive".into(),
            });
        }
        Ok(Self { dim_c, dim_r })
    }

    pub fn dim_v(&self) -> usize {
        self.dim_c + self.dim_r
    }
}

impl Default for Dims {
    fn default() -> Self {
        Self { dim_c: 1, dim_r: 1 }
    }
}

/// `x -> act(x W1 + b1) W2 + b2`, with no output nonlinearity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    activation: Activation,
}

impl Mlp {
    /// Gaussian(0, `INIT_STD`) weights, zero biases.
    pub fn init<R: Rng + ?Sized>(
        input: usize,
        hidden: usize,
        output: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| normal.sample(rng)).collect() };
        let w1 = Tensor::from_rows(input, hidden, draw(input * hidden));
        let w2 = Tensor::from_rows(hidden, output, draw(hidden * output));
        Self {
            w1,
            b1: Tensor::zeros(&[1, hidden]),
            w2,
            b2: Tensor::zeros(&[1, output]),
            activation,
        }
    }

    pub fn zeros(input: usize, hidden: usize, output: usize, activation: Activation) -> Self {
        Self {
            w1: Tensor::zeros(&[input, hidden]),
            b1: Tensor::zeros(&[1, hidden]),
            w2: Tensor::zeros(&[hidden, output]),
            b2: Tensor::zeros(&[1, output]),
            activation,
        }
    }

    /// Assembles a network from explicit parameters, checking shapes and finiteness.
    pub fn from_parts(w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor, activation: Activation) -> Result<Self> {
        let bad = |reason: String| Error::Config {
            field: "mlp".into(),
            reason,
        };
        if w1.shape().len() != 2 || w2.shape().len() != 2 {
            return Err(bad("weights must be rank-2".into()));
        }
        let (input, hidden, output) = (w1.shape()[0], w1.shape()[1], w2.shape()[1]);
        if w2.shape()[0] != hidden || b1.shape() != [1, hidden] || b2.shape() != [1, output] {
            return Err(bad(format!(
                "inconsistent shapes w1 {:?} b1 {:?} w2 {:?} b2 {:?}",
                w1.shape(),
                b1.shape(),
                w2.shape(),
                b2.shape()
            )));
        }
        if ![&w1, &b1, &w2, &b2].iter().all(|t| t.is_finite()) {
            return Err(bad(format!("non-finite parameters in {input}->{hidden}->{output} net")));
        }
        Ok(Self {
            w1,
            b1,
            w2,
            b2,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.w2.shape()[1]
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Parameters in a fixed order: `w1, b1, w2, b2`.
    pub fn params(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// All parameters concatenated in `params()` order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.params().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Overwrites parameters from a vector in `to_flat` layout.
    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length");
        let mut offset = 0;
        for t in self.params_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }

    /// Records the parameters on `tape` as leaves.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundMlp> {
        Ok(BoundMlp {
            ids: [
                tape.leaf(self.w1.clone())?,
                tape.leaf(self.b1.clone())?,
                tape.leaf(self.w2.clone())?,
                tape.leaf(self.b2.clone())?,
            ],
            activation: self.activation,
            input: self.input_dim(),
        })
    }

    /// Tape-free evaluation on a batch.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let xi = tape.leaf(x.clone())?;
        let y = bound.forward(&mut tape, xi, "mlp")?;
        Ok(tape.value(y)?.clone())
    }
}

/// Node handles of an [`Mlp`]'s parameters on one tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundMlp {
    ids: [NodeId; 4],
    activation: Activation,
    input: usize,
}

impl BoundMlp {
    /// Uses existing nodes (in `params()` order) as the parameters of a
    /// network shaped like `like`.
    pub fn from_nodes(ids: [NodeId; 4], like: &Mlp) -> Self {
        Self {
            ids,
            activation: like.activation,
            input: like.input_dim(),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeId, net: &'static str) -> Result<NodeId> {
        let got = tape.value(x)?.cols();
        if got != self.input {
            return Err(Error::Width {
                net,
                expected: self.input,
                got,
            });
        }
        let [w1, b1, w2, b2] = self.ids;
        let h = tape.matmul(x, w1)?;
        let h = tape.add(h, b1)?;
        let h = match self.activation {
            Activation::Relu => tape.relu(h)?,
            Activation::LeakyRelu(s) => tape.leaky_relu(h, s)?,
        };
        let y = tape.matmul(h, w2)?;
        Ok(tape.add(y, b2)?)
    }

    /// Gradients in `params()` order.
    pub fn grads(&self, store: &GradStore, net: &Mlp) -> Vec<Tensor> {
        self.ids
            .iter()
            .zip(net.params())
            .map(|(&id, p)| store.get_or_zeros(id, p))
            .collect()
    }
}

/// Order-sensitive hash of parameter shapes and exact bit patterns.
pub fn fingerprint<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> u64 {
    let mut h = DefaultHasher::new();
    for t in params {
        t.shape().hash(&mut h);
        for x in t.data() {
            x.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

/// Layout of the disentangler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DisentanglerKind {
    /// Separate `V -> C` and `V -> R` networks.
    #[default]
    Split,
    /// One `V -> C ++ R` network whose output is split.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Disentangler {
    Split { d_c: Mlp, d_r: Mlp },
    Joint(Mlp),
}

impl Disentangler {
    pub fn nets(&self) -> Vec<&Mlp> {
        match self {
            Disentangler::Split { d_c, d_r } => vec![d_c, d_r],
            Disentangler::Joint(m) => vec![m],
        }
    }

    pub fn nets_mut(&mut self) -> Vec<&mut Mlp> {
        match self {
            Disentangler::Split { d_c, d_r } => vec![d_c, d_r],
            Disentangler::Joint(m) => vec![m],
        }
    }
}

/// The two generators: disentangler `D: V -> (C, R)` and entangler `E: (C, R) -> V`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSet {
    pub dims: Dims,
    pub d: Disentangler,
    pub e: Mlp,
}

/// Adversaries on `C` and `V`, each producing one raw score per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSet {
    pub a_c: Mlp,
    pub a_v: Mlp,
}

/// Seeded initialization of all four networks. Draw order: `D`, `E`, `A_C`, `A_V`.
pub fn init_params<R: Rng + ?Sized>(
    dims: Dims,
    hidden: usize,
    kind: DisentanglerKind,
    rng: &mut R,
) -> (GeneratorSet, DiscriminatorSet) {
    let (dc, dr, dv) = (dims.dim_c, dims.dim_r, dims.dim_v());
    let d = match kind {
        DisentanglerKind::Split => Disentangler::Split {
            d_c: Mlp::init(dv, hidden, dc, Activation::Relu, rng),
            d_r: Mlp::init(dv, hidden, dr, Activation::Relu, rng),
        },
        DisentanglerKind::Joint => Disentangler::Joint(Mlp::init(dv, hidden, dv, Activation::Relu, rng)),
    };
    let e = Mlp::init(dv, hidden, dv, Activation::Relu, rng);
    let leaky = Activation::LeakyRelu(LEAKY_SLOPE);
    let a_c = Mlp::init(dc, hidden, 1, leaky, rng);
    let a_v = Mlp::init(dv, hidden, 1, leaky, rng);
    (GeneratorSet { dims, d, e }, DiscriminatorSet { a_c, a_v })
}

/// Identity on selected input coordinates via `x = relu(x) - relu(-x)`,
/// padded with dead hidden units up to `hidden`.
fn selector(input: usize, take: std::ops::Range<usize>, hidden: usize) -> Mlp {
    let out = take.len();
    assert!(hidden >= 2 * out, "hidden width too small for an exact identity");
    let mut w1 = vec![0.0; input * hidden];
    let mut w2 = vec![0.0; hidden * out];
    for (k, i) in take.enumerate() {
        w1[i * hidden + 2 * k] = 1.0;
        w1[i * hidden + 2 * k + 1] = -1.0;
        w2[(2 * k) * out + k] = 1.0;
        w2[(2 * k + 1) * out + k] = -1.0;
    }
    Mlp::from_parts(
        Tensor::from_rows(input, hidden, w1),
        Tensor::zeros(&[1, hidden]),
        Tensor::from_rows(hidden, out, w2),
        Tensor::zeros(&[1, out]),
        Activation::Relu,
    )
    .expect("consistent selector shapes")
}

impl GeneratorSet {
    /// Generators that split and concatenate exactly: `D(v) = (v[..dim_c], v[dim_c..])`
    /// and `E(c, r) = c ++ r`.
    pub fn exact_inverse(dims: Dims, hidden: usize, kind: DisentanglerKind) -> Self {
        let (dc, dv) = (dims.dim_c, dims.dim_v());
        let d = match kind {
            DisentanglerKind::Split => Disentangler::Split {
                d_c: selector(dv, 0..dc, hidden),
                d_r: selector(dv, dc..dv, hidden),
            },
            DisentanglerKind::Joint => Disentangler::Joint(selector(dv, 0..dv, hidden)),
        };
        Self {
            dims,
            d,
            e: selector(dv, 0..dv, hidden),
        }
    }

    pub fn kind(&self) -> DisentanglerKind {
        match self.d {
            Disentangler::Split { .. } => DisentanglerKind::Split,
            Disentangler::Joint(_) => DisentanglerKind::Joint,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundGenerators> {
        let d = match &self.d {
            Disentangler::Split { d_c, d_r } => BoundDisentangler::Split {
                d_c: d_c.bind(tape)?,
                d_r: d_r.bind(tape)?,
            },
            Disentangler::Joint(m) => BoundDisentangler::Joint(m.bind(tape)?),
        };
        Ok(BoundGenerators {
            dims: self.dims,
            d,
            e: self.e.bind(tape)?,
        })
    }

    /// Parameters of `D`, in the order used by [`BoundGenerators::d_grads`].
    pub fn d_params_mut(&mut self) -> Vec<&mut Tensor> {
        self.d.nets_mut().into_iter().flat_map(|m| m.params_mut()).collect()
    }

    pub fn e_params_mut(&mut self) -> Vec<&mut Tensor> {
        self.e.params_mut().into_iter().collect()
    }

    /// `D`'s parameters followed by `E`'s.
    pub fn generator_params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.d.nets_mut().into_iter().flat_map(|m| m.params_mut()).collect();
        out.extend(self.e.params_mut());
        out
    }

    pub fn d_params(&self) -> Vec<&Tensor> {
        self.d.nets().into_iter().flat_map(|m| m.params()).collect()
    }

    pub fn e_params(&self) -> Vec<&Tensor> {
        self.e.params().into_iter().collect()
    }

    /// Tape-free `D(v)`.
    pub fn disentangle(&self, v: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let vi = tape.leaf(v.clone())?;
        let (c, r) = bound.disentangle(&mut tape, vi)?;
        Ok((tape.value(c)?.clone(), tape.value(r)?.clone()))
    }

    /// Tape-free `E(c, r)`.
    pub fn entangle(&self, c: &Tensor, r: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let ci = tape.leaf(c.clone())?;
        let ri = tape.leaf(r.clone())?;
        let v = bound.entangle(&mut tape, ci, ri)?;
        Ok(tape.value(v)?.clone())
    }
}

impl DiscriminatorSet {
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let [a, b, c, d] = self.a_c.params_mut();
        let [e, f, g, h] = self.a_v.params_mut();
        vec![a, b, c, d, e, f, g, h]
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.a_c.params().into_iter().chain(self.a_v.params()).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub enum BoundDisentangler {
    Split { d_c: BoundMlp, d_r: BoundMlp },
    Joint(BoundMlp),
}

/// Generator parameters recorded on one tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundGenerators {
    dims: Dims,
    d: BoundDisentangler,
    e: BoundMlp,
}

impl BoundGenerators {
    /// `(c', r') = D(v)`.
    pub fn disentangle(&self, tape: &mut Tape, v: NodeId) -> Result<(NodeId, NodeId)> {
        match self.d {
            BoundDisentangler::Split { d_c, d_r } => {
                let c = d_c.forward(tape, v, "d_c")?;
                let r = d_r.forward(tape, v, "d_r")?;
                Ok((c, r))
            }
            BoundDisentangler::Joint(m) => {
                let out = m.forward(tape, v, "d")?;
                let parts = tape.split(out, &[self.dims.dim_c, self.dims.dim_r])?;
                Ok((parts[0], parts[1]))
            }
        }
    }

    /// `v' = E(c ++ r)`.
    pub fn entangle(&self, tape: &mut Tape, c: NodeId, r: NodeId) -> Result<NodeId> {
        let (cb, rb) = (tape.value(c)?.rows(), tape.value(r)?.rows());
        if cb != rb {
            return Err(Error::BatchMismatch { left: cb, right: rb });
        }
        let (cw, rw) = (tape.value(c)?.cols(), tape.value(r)?.cols());
        if cw != self.dims.dim_c {
            return Err(Error::Width {
                net: "e(c)",
                expected: self.dims.dim_c,
                got: cw,
            });
        }
        if rw != self.dims.dim_r {
            return Err(Error::Width {
                net: "e(r)",
                expected: self.dims.dim_r,
                got: rw,
            });
        }
        let cr = tape.concat(&[c, r])?;
        self.e.forward(tape, cr, "e")
    }

    pub fn d_grads(&self, store: &GradStore, gen: &GeneratorSet) -> Vec<Tensor> {
        match (&self.d, &gen.d) {
            (BoundDisentangler::Split { d_c, d_r }, Disentangler::Split { d_c: pc, d_r: pr }) => {
                let mut g = d_c.grads(store, pc);
                g.extend(d_r.grads(store, pr));
                g
            }
            (BoundDisentangler::Joint(b), Disentangler::Joint(m)) => b.grads(store, m),
            _ => panic!("generator layout changed between bind and backward"),
        }
    }

    pub fn e_grads(&self, store: &GradStore, gen: &GeneratorSet) -> Vec<Tensor> {
        self.e.grads(store, &gen.e)
    }
}

/// Discriminator parameters recorded on one tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundDiscriminators {
    pub a_c: BoundMlp,
    pub a_v: BoundMlp,
}

impl BoundDiscriminators {
    pub fn bind(disc: &DiscriminatorSet, tape: &mut Tape) -> Result<Self> {
        Ok(Self {
            a_c: disc.a_c.bind(tape)?,
            a_v: disc.a_v.bind(tape)?,
        })
    }

    pub fn grads(&self, store: &GradStore, disc: &DiscriminatorSet) -> Vec<Tensor> {
        let mut g = self.a_c.grads(store, &disc.a_c);
        g.extend(self.a_v.grads(store, &disc.a_v));
        g
    }
}

/// Scores `x` with an adversary: one unbounded real value per row.
pub fn discriminate(adv: &Mlp, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = adv.bind(&mut tape)?;
    let xi = tape.leaf(x.clone())?;
    let s = bound.forward(&mut tape, xi, "adversary")?;
    Ok(tape.value(s)?.clone())
}
