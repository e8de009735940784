use std::sync::atomic::{AtomicU64, Ordering};

use super::{AutodiffError, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(0);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

impl NodeId {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Primitive operation kinds, with their attributes.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Rank-2 matrix product.
    Matmul,
    /// Elementwise sum; the second operand may be a single row broadcast over the batch.
    Add,
    /// Elementwise difference, broadcasting like [`Op::Add`].
    Sub,
    Scale(f64),
    Relu,
    LeakyRelu(f64),
    /// Concatenation along the last dimension (any number of inputs).
    Concat,
    /// Columns `start..start + len` of the last dimension.
    Narrow {
        start: usize,
        len: usize,
    },
    Square,
    Abs,
    /// Mean over all elements, producing a scalar.
    Mean,
    /// Sum over all elements, producing a scalar.
    Sum,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Matmul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Scale(_) => "scalar-mul",
            Op::Relu => "relu",
            Op::LeakyRelu(_) => "leaky-relu",
            Op::Concat => "concat-last-dim",
            Op::Narrow { .. } => "narrow-last-dim",
            Op::Square => "square",
            Op::Abs => "abs",
            Op::Mean => "mean-reduce",
            Op::Sum => "sum-reduce",
        }
    }

    fn is_piecewise(&self) -> bool {
        matches!(self, Op::Relu | Op::LeakyRelu(_) | Op::Abs)
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Option<Op>,
    inputs: Vec<usize>,
    value: Tensor,
}

/// Define-by-run recording of a computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every input index is smaller
/// than the index of the node that consumes it.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar with respect to every node of a tape.
#[derive(Debug, Clone)]
pub struct GradStore {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl GradStore {
    /// Gradient of `id`, or `None` if `id` does not influence the loss.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        if id.tape != self.tape {
            return None;
        }
        self.grads.get(id.index).and_then(Option::as_ref)
    }

    /// Gradient of `id`, with zeros of `like`'s shape when absent.
    pub fn get_or_zeros(&self, id: NodeId, like: &Tensor) -> Tensor {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn broadcast_ok(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() || (b.rows() == 1 && b.cols() == a.cols() && a.shape().len() == 2)
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

// g[m,n] * b[k,n]^T -> [m,k]
fn matmul_nt(g: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

// a[m,k]^T * g[m,n] -> [k,n]
fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
    out
}

fn sum_rows(g: &Tensor, like: &Tensor) -> Tensor {
    if g.shape() == like.shape() {
        return g.clone();
    }
    let cols = g.cols();
    let mut out = vec![0.0; cols];
    for r in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    like.with_data(out)
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Option<Op>, inputs: Vec<usize>, value: Tensor) -> NodeId {
        let index = self.nodes.len();
        self.nodes.push(Node { op, inputs, value });
        NodeId { tape: self.id, index }
    }

    fn check(&self, id: NodeId) -> Result<usize, AutodiffError> {
        if id.tape != self.id || id.index >= self.nodes.len() {
            return Err(AutodiffError::UnknownNode);
        }
        Ok(id.index)
    }

    /// Records an input value. Non-finite values are rejected.
    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId, AutodiffError> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: "leaf" });
        }
        Ok(self.push(None, Vec::new(), value))
    }

    /// Records a copy of `id`'s value as a fresh leaf; gradients stop here.
    pub fn detach(&mut self, id: NodeId) -> Result<NodeId, AutodiffError> {
        let v = self.value(id)?.clone();
        Ok(self.push(None, Vec::new(), v))
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor, AutodiffError> {
        let i = self.check(id)?;
        Ok(&self.nodes[i].value)
    }

    /// Value of a scalar node.
    pub fn scalar(&self, id: NodeId) -> Result<f64, AutodiffError> {
        let v = self.value(id)?;
        v.item().ok_or_else(|| AutodiffError::NonScalar {
            shape: v.shape().to_vec(),
        })
    }

    /// Evaluates `op` on recorded inputs and records the result.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId, AutodiffError> {
        let idx = inputs.iter().map(|&id| self.check(id)).collect::<Result<Vec<_>, _>>()?;
        let vals: Vec<&Tensor> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let value = forward(&op, &vals)?;
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op.name() });
        }
        Ok(self.push(Some(op), idx, value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.apply(Op::Matmul, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId, AutodiffError> {
        self.apply(Op::Scale(s), &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.apply(Op::Relu, &[a])
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId, AutodiffError> {
        self.apply(Op::LeakyRelu(slope), &[a])
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, AutodiffError> {
        self.apply(Op::Concat, parts)
    }

    pub fn narrow(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, AutodiffError> {
        self.apply(Op::Narrow { start, len }, &[a])
    }

    /// Splits the last dimension into consecutive pieces of the given widths.
    pub fn split(&mut self, a: NodeId, sizes: &[usize]) -> Result<Vec<NodeId>, AutodiffError> {
        let width = self.value(a)?.cols();
        if sizes.iter().sum::<usize>() != width || sizes.contains(&0) {
            return Err(AutodiffError::InvalidSplit {
                sizes: sizes.to_vec(),
                width,
            });
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.narrow(a, start, len)?);
            start += len;
        }
        Ok(out)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.apply(Op::Square, &[a])
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.apply(Op::Abs, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.apply(Op::Mean, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.apply(Op::Sum, &[a])
    }

    /// Sign of every input element of every piecewise-linear node
    /// (relu, leaky-relu, abs), in tape order. Used to detect kinks.
    pub fn kink_pattern(&self) -> Vec<i8> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if node.op.as_ref().is_some_and(Op::is_piecewise) {
                let x = &self.nodes[node.inputs[0]].value;
                out.extend(x.data().iter().map(|&v| {
                    if v > 0.0 {
                        1
                    } else if v < 0.0 {
                        -1
                    } else {
                        0
                    }
                }));
            }
        }
        out
    }

    /// Reverse-mode gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: NodeId) -> Result<GradStore, AutodiffError> {
        let li = self.check(loss)?;
        let lv = &self.nodes[li].value;
        if !lv.is_scalar() {
            return Err(AutodiffError::NonScalar {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; li + 1];
        grads[li] = Some(lv.with_data(vec![1.0]));

        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(op) = &node.op {
                let ins: Vec<&Tensor> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
                let local = vjp(op, &ins, &node.value, &g);
                for (&j, gj) in node.inputs.iter().zip(local) {
                    match &mut grads[j] {
                        Some(acc) => acc.add_assign(&gj),
                        slot @ None => *slot = Some(gj),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(GradStore { tape: self.id, grads })
    }
}

fn mismatch(op: &Op, ins: &[&Tensor]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op: op.name(),
        shapes: ins.iter().map(|t| t.shape().to_vec()).collect(),
    }
}

fn forward(op: &Op, ins: &[&Tensor]) -> Result<Tensor, AutodiffError> {
    let arity = match op {
        Op::Matmul | Op::Add | Op::Sub => Some(2),
        Op::Concat => None,
        _ => Some(1),
    };
    if arity.is_some_and(|n| n != ins.len()) || ins.is_empty() {
        return Err(AutodiffError::Arity {
            op: op.name(),
            got: ins.len(),
        });
    }
    if ins.iter().any(|t| !t.is_finite()) {
        return Err(AutodiffError::NonFinite { op: op.name() });
    }
    let a = ins[0];
    let out = match op {
        Op::Matmul => {
            let b = ins[1];
            if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(mismatch(op, ins));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            Tensor::from_rows(m, n, matmul(a.data(), b.data(), m, k, n))
        }
        Op::Add | Op::Sub => {
            let b = ins[1];
            if !broadcast_ok(a, b) {
                return Err(mismatch(op, ins));
            }
            let sign = if *op == Op::Add { 1.0 } else { -1.0 };
            let bc = b.data();
            let n = bc.len();
            a.with_data(
                a.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| x + sign * bc[i % n])
                    .collect(),
            )
        }
        Op::Scale(s) => a.map(|x| s * x),
        Op::Relu => a.map(|x| if x > 0.0 { x } else { 0.0 }),
        Op::LeakyRelu(s) => a.map(|x| if x > 0.0 { x } else { s * x }),
        Op::Concat => {
            let rows = a.rows();
            let lead = &a.shape()[..a.shape().len() - 1];
            if ins.iter().any(|t| &t.shape()[..t.shape().len() - 1] != lead) {
                return Err(mismatch(op, ins));
            }
            let width: usize = ins.iter().map(|t| t.cols()).sum();
            let mut data = Vec::with_capacity(rows * width);
            for r in 0..rows {
                for t in ins {
                    data.extend_from_slice(t.row(r));
                }
            }
            let mut shape = lead.to_vec();
            shape.push(width);
            Tensor::new(shape, data)?
        }
        Op::Narrow { start, len } => {
            if *len == 0 || start + len > a.cols() {
                return Err(mismatch(op, ins));
            }
            let mut data = Vec::with_capacity(a.rows() * len);
            for r in 0..a.rows() {
                data.extend_from_slice(&a.row(r)[*start..start + len]);
            }
            let mut shape = a.shape().to_vec();
            *shape.last_mut().unwrap() = *len;
            Tensor::new(shape, data)?
        }
        Op::Square => a.map(|x| x * x),
        Op::Abs => a.map(f64::abs),
        Op::Mean => Tensor::scalar(a.data().iter().sum::<f64>() / a.numel() as f64),
        Op::Sum => Tensor::scalar(a.data().iter().sum()),
    };
    Ok(out)
}

/// Vector-Jacobian products of `op` for each input, given upstream gradient `g`.
fn vjp(op: &Op, ins: &[&Tensor], out: &Tensor, g: &Tensor) -> Vec<Tensor> {
    let a = ins[0];
    let zip_map = |x: &Tensor, f: &dyn Fn(f64, f64) -> f64| {
        x.with_data(x.data().iter().zip(g.data()).map(|(&xv, &gv)| f(xv, gv)).collect())
    };
    match op {
        Op::Matmul => {
            let b = ins[1];
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            vec![
                a.with_data(matmul_nt(g.data(), b.data(), m, k, n)),
                b.with_data(matmul_tn(a.data(), g.data(), m, k, n)),
            ]
        }
        Op::Add => vec![g.clone(), sum_rows(g, ins[1])],
        Op::Sub => {
            let gb = sum_rows(g, ins[1]).map(|x| -x);
            vec![g.clone(), gb]
        }
        Op::Scale(s) => vec![g.map(|x| s * x)],
        // Subgradient at exactly zero is the negative-side slope.
        Op::Relu => vec![zip_map(a, &|x, gv| if x > 0.0 { gv } else { 0.0 })],
        Op::LeakyRelu(s) => vec![zip_map(a, &|x, gv| if x > 0.0 { gv } else { s * gv })],
        Op::Concat => {
            let mut offset = 0;
            let width = out.cols();
            ins.iter()
                .map(|t| {
                    let c = t.cols();
                    let mut data = Vec::with_capacity(t.numel());
                    for r in 0..t.rows() {
                        data.extend_from_slice(&g.data()[r * width + offset..r * width + offset + c]);
                    }
                    offset += c;
                    t.with_data(data)
                })
                .collect()
        }
        Op::Narrow { start, len } => {
            let mut data = vec![0.0; a.numel()];
            let c = a.cols();
            for r in 0..a.rows() {
                data[r * c + start..r * c + start + len].copy_from_slice(g.row(r));
            }
            vec![a.with_data(data)]
        }
        Op::Square => vec![zip_map(a, &|x, gv| 2.0 * x * gv)],
        Op::Abs => vec![zip_map(a, &|x, gv| {
            if x > 0.0 {
                gv
            } else if x < 0.0 {
                -gv
            } else {
                0.0
            }
        })],
        Op::Mean => {
            let s = g.data()[0] / a.numel() as f64;
            vec![Tensor::full(a.shape(), s)]
        }
        Op::Sum => vec![Tensor::full(a.shape(), g.data()[0])],
    }
}
