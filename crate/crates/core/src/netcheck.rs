//! Finite-difference checks of every network shape under the losses it is
//! trained with.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::autodiff::{grad_check, AutodiffError, NodeId, Tape, Tensor};
use crate::nn::{Activation, BoundMlp, Dims, Mlp, LEAKY_SLOPE};
use crate::objectives::{l1, lsgan_discriminator, lsgan_generator};
use crate::{Error, Result};

const BATCH: usize = 6;

/// Central-difference step used by the network checks.
pub const DEFAULT_EPS: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Network {
    DC,
    DR,
    DJoint,
    E,
    AC,
    AV,
}

impl Network {
    pub const ALL: [Network; 6] = [
        Network::DC,
        Network::DR,
        Network::DJoint,
        Network::E,
        Network::AC,
        Network::AV,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Network::DC => "d_c",
            Network::DR => "d_r",
            Network::DJoint => "d_joint",
            Network::E => "e",
            Network::AC => "a_c",
            Network::AV => "a_v",
        }
    }

    fn io(&self, dims: Dims) -> (usize, usize) {
        let dv = dims.dim_v();
        match self {
            Network::DC => (dv, dims.dim_c),
            Network::DR => (dv, dims.dim_r),
            Network::DJoint | Network::E => (dv, dv),
            Network::AC => (dims.dim_c, 1),
            Network::AV => (dv, 1),
        }
    }

    fn is_adversary(&self) -> bool {
        matches!(self, Network::AC | Network::AV)
    }

    fn activation(&self) -> Activation {
        if self.is_adversary() {
            Activation::LeakyRelu(LEAKY_SLOPE)
        } else {
            Activation::Relu
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NetworkCheck {
    pub network: Network,
    pub parameterizations: usize,
    pub max_rel_error: f64,
    pub checked: usize,
    pub excluded: usize,
}

impl NetworkCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol && self.checked > 0
    }
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = Normal::new(0.0, std).expect("positive std");
    Tensor::from_rows(rows, cols, (0..rows * cols).map(|_| n.sample(rng)).collect())
}

fn autodiff_only(e: Error) -> AutodiffError {
    match e {
        Error::Autodiff(a) => a,
        // widths are constructed to match
        other => unreachable!("{other}"),
    }
}

struct Case {
    net: Mlp,
    x: Tensor,
    x_other: Tensor,
    target: Tensor,
}

impl Case {
    /// Training loss with parameter `slot` (or, for slot 4, the input batch)
    /// taken from `probe`.
    fn loss(&self, tape: &mut Tape, probe: NodeId, slot: usize, adversary: bool) -> Result<NodeId, AutodiffError> {
        let mut ids = [probe; 4];
        for (k, p) in self.net.params().into_iter().enumerate() {
            if k != slot {
                ids[k] = tape.leaf(p.clone())?;
            }
        }
        let bound = BoundMlp::from_nodes(ids, &self.net);
        let x = if slot == 4 { probe } else { tape.leaf(self.x.clone())? };
        let y = bound.forward(tape, x, "net").map_err(autodiff_only)?;
        if adversary {
            let other = tape.leaf(self.x_other.clone())?;
            let fake = bound.forward(tape, other, "net").map_err(autodiff_only)?;
            lsgan_discriminator(tape, y, fake).map_err(autodiff_only)
        } else {
            let t = tape.leaf(self.target.clone())?;
            let recon = l1(tape, y, t).map_err(autodiff_only)?;
            let recon = tape.scale(recon, 10.0)?;
            let g = lsgan_generator(tape, y).map_err(autodiff_only)?;
            tape.add(recon, g)
        }
    }
}

/// Checks all parameters and the input of `network` at `n` random
/// parameterizations (weight scales drawn from 0.1 to 1).
pub fn check_network(
    network: Network,
    dims: Dims,
    hidden: usize,
    n: usize,
    seed: u64,
    eps: f64,
) -> Result<NetworkCheck> {
    let (input, output) = network.io(dims);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = NetworkCheck {
        network,
        parameterizations: n,
        max_rel_error: 0.0,
        checked: 0,
        excluded: 0,
    };
    for _ in 0..n {
        let std = rng.random_range(0.1..1.0);
        let net = Mlp::from_parts(
            gaussian(input, hidden, std, &mut rng),
            gaussian(1, hidden, std, &mut rng),
            gaussian(hidden, output, std, &mut rng),
            gaussian(1, output, std, &mut rng),
            network.activation(),
        )?;
        let case = Case {
            x: gaussian(BATCH, input, 2.0, &mut rng),
            x_other: gaussian(BATCH, input, 2.0, &mut rng),
            target: gaussian(BATCH, output, 1.0, &mut rng),
            net,
        };
        let mut points: Vec<Tensor> = case.net.params().into_iter().cloned().collect();
        points.push(case.x.clone());
        for (slot, point) in points.iter().enumerate() {
            let rep = grad_check(
                |tape, p| case.loss(tape, p, slot, network.is_adversary()),
                point,
                eps,
                f64::INFINITY,
            )?;
            report.max_rel_error = report.max_rel_error.max(rep.max_rel_error);
            report.checked += rep.checked;
            report.excluded += rep.excluded.len();
        }
    }
    Ok(report)
}
