//! Wengert-list reverse-mode differentiation.
//!
//! Every primitive application is appended to the tape together with its
//! output value. Inputs always precede outputs, so a single reverse sweep over
//! the node list is a valid topological traversal.

use std::cell::RefCell;

use super::tensor::{matmul_raw, transpose_raw, Tensor};
use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Reduce over rows, keeping one row: `r x c -> 1 x c`.
    Rows,
    /// Reduce over columns, keeping one column: `r x c -> r x 1`.
    Cols,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Constant,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    SoftmaxRows(NodeId),
    Concat { inputs: Vec<NodeId>, axis: Axis },
    ReduceMean(NodeId, Axis),
    ReduceMax { input: NodeId, axis: Axis, argmax: Vec<usize> },
    Sum(NodeId),
    L2Norm(NodeId),
    AddRow(NodeId, NodeId),
    Transpose(NodeId),
    GatherRows(NodeId, Vec<usize>),
    Reshape(NodeId),
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf | Constant => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) => vec![*a, *b],
            Scale(a, _) | Relu(a) | Tanh(a) | Exp(a) | Log(a) | SoftmaxRows(a) | ReduceMean(a, _)
            | Sum(a) | L2Norm(a) | Transpose(a) | GatherRows(a, _) | Reshape(a) => vec![*a],
            ReduceMax { input, .. } => vec![*input],
            Concat { inputs, .. } => inputs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive applications.
///
/// A tape is confined to one thread (`!Sync`) but may be moved between
/// threads once built.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

/// Gradients of a scalar output with respect to the tape's leaves.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    pub fn wrt(&self, var: &Var<'_>) -> Option<&Tensor> {
        self.get(var.id)
    }

    /// Gradient of `id`, or zeros of `shape` when the leaf was unused.
    pub fn take_or_zeros(&mut self, id: NodeId, shape: &[usize]) -> Tensor {
        self.grads
            .get_mut(id)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(shape))
    }

    /// Number of leaves that received a gradient.
    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable input; gradients are reported for it.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Constant, value, false)
    }

    pub fn var(&self, id: NodeId) -> Result<Var<'_>> {
        if id < self.len() {
            Ok(Var { tape: self, id })
        } else {
            Err(Error::Detached)
        }
    }

    pub fn value(&self, id: NodeId) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    fn push(&self, op: Op, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self, id }
    }

    fn requires_grad(&self, ids: &[NodeId]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn record(&self, op: Op, value: Tensor) -> Var<'_> {
        let rg = self.requires_grad(&op.inputs());
        self.push(op, value, rg)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: &Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(output.tape, self) {
            return Err(Error::Detached);
        }
        let shape = output.shape();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalar(shape));
        }
        self.backward_with_seed(output.id, Tensor::full(&shape, 1.0))
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like node `output`)
    /// back to the leaves.
    pub fn backward_with_seed(&self, output: NodeId, seed: Tensor) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let Some(out) = nodes.get(output) else {
            return Err(Error::Detached);
        };
        if out.value.shape() != seed.shape() {
            return Err(Error::shape("backward", &[out.value.shape(), seed.shape()]));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output + 1];
        grads[output] = Some(seed);

        for id in (0..=output).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf | Op::Constant) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, gi) in local_grads(&nodes, node, &g) {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&gi),
                    slot => *slot = Some(gi),
                }
            }
        }

        for (id, g) in grads.iter_mut().enumerate() {
            if !matches!(nodes[id].op, Op::Leaf) || !nodes[id].requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients flowing from `node` (with upstream `g`) into each of its inputs.
fn local_grads(nodes: &[Node], node: &Node, g: &Tensor) -> Vec<(NodeId, Tensor)> {
    let val = |i: NodeId| &nodes[i].value;
    let y = &node.value;
    match &node.op {
        Op::Leaf | Op::Constant => vec![],
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k) = ta.dims2().unwrap();
            let n = tb.cols();
            let bt = transpose_raw(tb.data(), k, n);
            let da = matmul_raw(g.data(), &bt, m, n, k);
            let at = transpose_raw(ta.data(), m, k);
            let db = matmul_raw(&at, g.data(), k, m, n);
            vec![
                (*a, Tensor::from_parts(ta.shape().to_vec(), da)),
                (*b, Tensor::from_parts(tb.shape().to_vec(), db)),
            ]
        }
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            mul_grads(*a, ta, *b, tb, g)
        }
        Op::Scale(a, s) => vec![(*a, g.map(|x| x * s))],
        Op::Relu(a) => vec![(*a, zip_map(g, val(*a), |gi, x| if x > 0.0 { gi } else { 0.0 }))],
        Op::Tanh(a) => vec![(*a, zip_map(g, y, |gi, t| gi * (1.0 - t * t)))],
        Op::Exp(a) => vec![(*a, zip_map(g, y, |gi, e| gi * e))],
        Op::Log(a) => vec![(*a, zip_map(g, val(*a), |gi, x| gi / x))],
        Op::SoftmaxRows(a) => {
            let (r, c) = y.dims2().unwrap();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let yr = y.row_slice(i);
                let gr = g.row_slice(i);
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    out[i * c + j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![(*a, Tensor::from_parts(vec![r, c], out))]
        }
        Op::Concat { inputs, axis } => {
            let (r, c) = g.dims2().unwrap();
            let mut out = Vec::with_capacity(inputs.len());
            let mut offset = 0;
            for &i in inputs {
                let (ri, ci) = val(i).dims2().unwrap();
                let mut d = Vec::with_capacity(ri * ci);
                match axis {
                    Axis::Cols => {
                        for row in 0..r {
                            d.extend_from_slice(&g.data()[row * c + offset..row * c + offset + ci]);
                        }
                        offset += ci;
                    }
                    Axis::Rows => {
                        d.extend_from_slice(&g.data()[offset * c..(offset + ri) * c]);
                        offset += ri;
                    }
                }
                out.push((i, Tensor::from_parts(vec![ri, ci], d)));
            }
            out
        }
        Op::ReduceMean(a, axis) => {
            let (r, c) = val(*a).dims2().unwrap();
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    d[i * c + j] = match axis {
                        Axis::Rows => g.data()[j] / r as f64,
                        Axis::Cols => g.data()[i] / c as f64,
                    };
                }
            }
            vec![(*a, Tensor::from_parts(vec![r, c], d))]
        }
        Op::ReduceMax { input, axis, argmax } => {
            let (r, c) = val(*input).dims2().unwrap();
            let mut d = vec![0.0; r * c];
            for (slot, &pos) in argmax.iter().enumerate() {
                let idx = match axis {
                    Axis::Rows => pos * c + slot,
                    Axis::Cols => slot * c + pos,
                };
                d[idx] += g.data()[slot];
            }
            vec![(*input, Tensor::from_parts(vec![r, c], d))]
        }
        Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
        Op::L2Norm(a) => {
            let x = val(*a);
            let norm = y.item();
            let gi = g.item();
            let d = if norm > 0.0 {
                x.map(|v| gi * v / norm)
            } else {
                Tensor::zeros(x.shape())
            };
            vec![(*a, d)]
        }
        Op::AddRow(a, row) => {
            let (r, c) = g.dims2().unwrap();
            let mut drow = vec![0.0; c];
            for i in 0..r {
                for (acc, v) in drow.iter_mut().zip(g.row_slice(i)) {
                    *acc += v;
                }
            }
            vec![(*a, g.clone()), (*row, Tensor::from_parts(vec![1, c], drow))]
        }
        Op::Transpose(a) => {
            let (r, c) = g.dims2().unwrap();
            vec![(*a, Tensor::from_parts(vec![c, r], transpose_raw(g.data(), r, c)))]
        }
        Op::GatherRows(a, idx) => {
            let src = val(*a);
            let c = src.cols();
            let mut d = Tensor::zeros(src.shape());
            for (k, &row) in idx.iter().enumerate() {
                for j in 0..c {
                    d.data_mut()[row * c + j] += g.data()[k * c + j];
                }
            }
            vec![(*a, d)]
        }
        Op::Reshape(a) => vec![(*a, g.reshaped(val(*a).shape().to_vec()))],
    }
}

fn mul_grads(a: NodeId, ta: &Tensor, b: NodeId, tb: &Tensor, g: &Tensor) -> Vec<(NodeId, Tensor)> {
    if ta.shape() == tb.shape() {
        return vec![(a, zip_map(g, tb, |gi, x| gi * x)), (b, zip_map(g, ta, |gi, x| gi * x))];
    }
    // scalar broadcast: one side has a single element
    let (s, ts, v, tv) = if ta.is_scalar() { (a, ta, b, tb) } else { (b, tb, a, ta) };
    let ds: f64 = g.data().iter().zip(tv.data()).map(|(x, y)| x * y).sum();
    let k = ts.item();
    vec![(s, Tensor::full(ts.shape(), ds)), (v, g.map(|x| x * k))]
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    fn with_pair<R>(&self, other: &Var<'t>, f: impl FnOnce(&Tensor, &Tensor) -> R) -> R {
        let nodes = self.tape.nodes.borrow();
        f(&nodes[self.id].value, &nodes[other.id].value)
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let out = self.with_value(|t| t.map(f));
        self.tape.record(op, out)
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        self.with_value(|t| t.dims2().ok_or_else(|| Error::shape(op, &[t.shape()])))
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let out = self.with_pair(other, |a, b| match (a.dims2(), b.dims2()) {
            (Some((m, k)), Some((k2, n))) if k == k2 => {
                Ok(Tensor::from_parts(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n)))
            }
            _ => Err(Error::shape("matmul", &[a.shape(), b.shape()])),
        })?;
        Ok(self.tape.record(Op::MatMul(self.id, other.id), out))
    }

    fn elementwise(&self, other: &Var<'t>, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.with_pair(other, |a, b| {
            if a.shape() == b.shape() {
                Ok(zip_map(a, b, f))
            } else {
                Err(Error::shape(op, &[a.shape(), b.shape()]))
            }
        })
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let out = self.elementwise(other, "add", |a, b| a + b)?;
        Ok(self.tape.record(Op::Add(self.id, other.id), out))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let out = self.elementwise(other, "sub", |a, b| a - b)?;
        Ok(self.tape.record(Op::Sub(self.id, other.id), out))
    }

    /// Elementwise product; a single-element operand broadcasts.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let out = self.with_pair(other, |a, b| {
            if a.shape() == b.shape() {
                Ok(zip_map(a, b, |x, y| x * y))
            } else if a.is_scalar() {
                let k = a.item();
                Ok(b.map(|x| k * x))
            } else if b.is_scalar() {
                let k = b.item();
                Ok(a.map(|x| k * x))
            } else {
                Err(Error::shape("mul", &[a.shape(), b.shape()]))
            }
        })?;
        Ok(self.tape.record(Op::Mul(self.id, other.id), out))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, s), |x| x * s)
    }

    /// `max(x, 0)`; the derivative at exactly 0 is 0.
    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn log(&self) -> Var<'t> {
        self.unary(Op::Log(self.id), f64::ln)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        let (r, c) = self.dims2("softmax_rows")?;
        let out = self.with_value(|t| {
            let mut d = Vec::with_capacity(r * c);
            for i in 0..r {
                let row = t.row_slice(i);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
                let z: f64 = e.iter().sum();
                d.extend(e.into_iter().map(|x| x / z));
            }
            Tensor::from_parts(vec![r, c], d)
        });
        Ok(self.tape.record(Op::SoftmaxRows(self.id), out))
    }

    pub fn reduce_mean(&self, axis: Axis) -> Result<Var<'t>> {
        let (r, c) = self.dims2("reduce_mean")?;
        let out = self.with_value(|t| match axis {
            Axis::Rows => {
                let mut d = vec![0.0; c];
                for i in 0..r {
                    for (acc, v) in d.iter_mut().zip(t.row_slice(i)) {
                        *acc += v;
                    }
                }
                Tensor::from_parts(vec![1, c], d.into_iter().map(|s| s / r as f64).collect())
            }
            Axis::Cols => Tensor::from_parts(
                vec![r, 1],
                (0..r).map(|i| t.row_slice(i).iter().sum::<f64>() / c as f64).collect(),
            ),
        });
        Ok(self.tape.record(Op::ReduceMean(self.id, axis), out))
    }

    /// Maximum along an axis; ties route the gradient to the first maximum.
    pub fn reduce_max(&self, axis: Axis) -> Result<Var<'t>> {
        let (r, c) = self.dims2("reduce_max")?;
        let (out, argmax) = self.with_value(|t| {
            let lanes = if axis == Axis::Rows { c } else { r };
            let len = if axis == Axis::Rows { r } else { c };
            let at = |lane: usize, k: usize| match axis {
                Axis::Rows => t.get(k, lane),
                Axis::Cols => t.get(lane, k),
            };
            let mut vals = Vec::with_capacity(lanes);
            let mut arg = Vec::with_capacity(lanes);
            for lane in 0..lanes {
                let mut best = 0;
                for k in 1..len {
                    if at(lane, k) > at(lane, best) {
                        best = k;
                    }
                }
                vals.push(at(lane, best));
                arg.push(best);
            }
            let shape = if axis == Axis::Rows { vec![1, c] } else { vec![r, 1] };
            (Tensor::from_parts(shape, vals), arg)
        });
        Ok(self.tape.record(
            Op::ReduceMax {
                input: self.id,
                axis,
                argmax,
            },
            out,
        ))
    }

    /// Sum of all elements, as a `1 x 1` value.
    pub fn sum(&self) -> Var<'t> {
        let s = self.with_value(|t| t.data().iter().sum());
        self.tape.record(Op::Sum(self.id), Tensor::scalar(s))
    }

    /// Euclidean norm of all elements, as a `1 x 1` value.
    pub fn l2_norm(&self) -> Var<'t> {
        let s = self.with_value(|t| t.data().iter().map(|x| x * x).sum::<f64>().sqrt());
        self.tape.record(Op::L2Norm(self.id), Tensor::scalar(s))
    }

    /// Adds a `1 x c` row to every row of an `r x c` matrix.
    pub fn add_row(&self, row: &Var<'t>) -> Result<Var<'t>> {
        let out = self.with_pair(row, |a, b| match (a.dims2(), b.dims2()) {
            (Some((r, c)), Some((1, c2))) if c == c2 => {
                let mut d = a.data().to_vec();
                for i in 0..r {
                    for (x, y) in d[i * c..(i + 1) * c].iter_mut().zip(b.data()) {
                        *x += y;
                    }
                }
                Ok(Tensor::from_parts(vec![r, c], d))
            }
            _ => Err(Error::shape("add_row", &[a.shape(), b.shape()])),
        })?;
        Ok(self.tape.record(Op::AddRow(self.id, row.id), out))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let (r, c) = self.dims2("transpose")?;
        let out = self.with_value(|t| Tensor::from_parts(vec![c, r], transpose_raw(t.data(), r, c)));
        Ok(self.tape.record(Op::Transpose(self.id), out))
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let (r, c) = self.dims2("gather_rows")?;
        if idx.is_empty() || idx.iter().any(|&i| i >= r) {
            return Err(Error::Shape {
                op: "gather_rows",
                shapes: vec![vec![r, c], idx.to_vec()],
            });
        }
        let out = self.with_value(|t| {
            let mut d = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                d.extend_from_slice(t.row_slice(i));
            }
            Tensor::from_parts(vec![idx.len(), c], d)
        });
        Ok(self.tape.record(Op::GatherRows(self.id, idx.to_vec()), out))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.with_value(|t| {
            if shape.iter().product::<usize>() == t.numel() && !shape.contains(&0) {
                Ok(t.reshaped(shape.to_vec()))
            } else {
                Err(Error::shape("reshape", &[t.shape(), shape]))
            }
        })?;
        Ok(self.tape.record(Op::Reshape(self.id), out))
    }
}

/// Concatenates rank-2 values along `axis` (`Cols` joins side by side).
pub fn concat<'t>(parts: &[Var<'t>], axis: Axis) -> Result<Var<'t>> {
    let Some(first) = parts.first() else {
        return Err(Error::Shape {
            op: "concat",
            shapes: vec![],
        });
    };
    let tape = first.tape;
    let nodes = tape.nodes.borrow();
    let tensors: Vec<&Tensor> = parts.iter().map(|p| &nodes[p.id].value).collect();
    let bad = || Error::Shape {
        op: "concat",
        shapes: tensors.iter().map(|t| t.shape().to_vec()).collect(),
    };
    let dims: Vec<(usize, usize)> = tensors.iter().map(|t| t.dims2()).collect::<Option<_>>().ok_or_else(bad)?;
    let out = match axis {
        Axis::Cols => {
            let r = dims[0].0;
            if dims.iter().any(|d| d.0 != r) {
                return Err(bad());
            }
            let c: usize = dims.iter().map(|d| d.1).sum();
            let mut d = Vec::with_capacity(r * c);
            for row in 0..r {
                for t in &tensors {
                    d.extend_from_slice(t.row_slice(row));
                }
            }
            Tensor::from_parts(vec![r, c], d)
        }
        Axis::Rows => {
            let c = dims[0].1;
            if dims.iter().any(|d| d.1 != c) {
                return Err(bad());
            }
            let r: usize = dims.iter().map(|d| d.0).sum();
            let mut d = Vec::with_capacity(r * c);
            for t in &tensors {
                d.extend_from_slice(t.data());
            }
            Tensor::from_parts(vec![r, c], d)
        }
    };
    drop(nodes);
    Ok(tape.record(
        Op::Concat {
            inputs: parts.iter().map(|p| p.id).collect(),
            axis,
        },
        out,
    ))
}
