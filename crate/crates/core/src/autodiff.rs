//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive as it is evaluated; [`Var`] is a cheap
//! handle into it. Leaves created with [`Tape::leaf`] receive gradients,
//! leaves created with [`Tape::constant`] never do, and neither does any node
//! that depends only on constants. The tape is meant to be rebuilt for every
//! training step.
//!
//! ```
//! use robustdiff::autodiff::Tape;
//! use robustdiff::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = x.square().unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).item().unwrap(), 6.0);
//! ```

use std::cell::{Ref, RefCell};
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{kernels, BroadcastMap, Tensor};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    Broadcast(usize),
    Sum(usize),
    SumCols(usize),
    Mean(usize),
    Square(usize),
    Sqrt(usize),
    Exp(usize),
    Sin(usize),
    Cos(usize),
    Tanh(usize),
    Max(usize, usize),
    Recip(usize),
    Neg(usize),
    Scale(usize, f64),
    Concat(Vec<usize>),
    Slice(usize, usize, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::Broadcast(..) => "broadcast",
            Op::Sum(..) => "sum",
            Op::SumCols(..) => "sum_cols",
            Op::Mean(..) => "mean",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Exp(..) => "exp",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::Tanh(..) => "tanh",
            Op::Max(..) => "max",
            Op::Recip(..) => "reciprocal",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::Concat(..) => "concat",
            Op::Slice(..) => "slice",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of primitive operations in evaluation order.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_unchecked(value, Op::Leaf, false)
    }

    fn push_unchecked(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op) -> Result<Var<'_>> {
        if value.has_nan() {
            return Err(Error::numeric(format!(
                "NaN produced by {} at node {}",
                op.name(),
                self.len()
            )));
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents(&op).iter().any(|&p| nodes[p].requires_grad)
        };
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn value_ref(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Reverse sweep from a scalar output.
    ///
    /// Every node gets an accumulator; nodes that do not influence `output`
    /// or do not depend on a differentiable leaf keep an all-zero gradient.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out.value.shape()
            )));
        }
        let mut grads: Vec<Tensor> = nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape()))
            .collect();
        if !out.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[output.id] = Tensor::ones(out.value.shape());

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            if grads[id].data().iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = std::mem::replace(&mut grads[id], Tensor::zeros(&[1]));
            propagate(&nodes, id, &g, &mut grads);
            grads[id] = g;
        }
        Ok(Gradients { grads })
    }
}

fn parents(op: &Op) -> Vec<usize> {
    match *op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::Max(a, b) => {
            vec![a, b]
        }
        Op::Broadcast(a)
        | Op::Sum(a)
        | Op::SumCols(a)
        | Op::Mean(a)
        | Op::Square(a)
        | Op::Sqrt(a)
        | Op::Exp(a)
        | Op::Sin(a)
        | Op::Cos(a)
        | Op::Tanh(a)
        | Op::Recip(a)
        | Op::Neg(a)
        | Op::Scale(a, _)
        | Op::Slice(a, _, _) => vec![a],
        Op::Concat(ref parts) => parts.clone(),
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Tensor], target: usize, f: impl FnOnce(&mut [f64])) {
    if nodes[target].requires_grad {
        f(grads[target].data_mut());
    }
}

fn elementwise(nodes: &[Node], grads: &mut [Tensor], target: usize, g: &Tensor, local: impl Fn(usize) -> f64) {
    accumulate(nodes, grads, target, |acc| {
        for (i, (a, &gv)) in acc.iter_mut().zip(g.data()).enumerate() {
            *a += gv * local(i);
        }
    });
}

fn propagate(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Tensor]) {
    let out = &nodes[id].value;
    match nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            elementwise(nodes, grads, a, g, |_| 1.0);
            elementwise(nodes, grads, b, g, |_| 1.0);
        }
        Op::Sub(a, b) => {
            elementwise(nodes, grads, a, g, |_| 1.0);
            elementwise(nodes, grads, b, g, |_| -1.0);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[a].value.data(), nodes[b].value.data());
            elementwise(nodes, grads, a, g, |i| bv[i]);
            elementwise(nodes, grads, b, g, |i| av[i]);
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            accumulate(nodes, grads, a, |acc| {
                kernels::gemm_nt(g.data(), bv.data(), acc, m, n, k)
            });
            accumulate(nodes, grads, b, |acc| {
                kernels::gemm_tn(av.data(), g.data(), acc, m, k, n)
            });
        }
        Op::Broadcast(a) => {
            let map = BroadcastMap::new(nodes[a].value.shape(), out.shape())
                .expect("broadcast validated at record time");
            accumulate(nodes, grads, a, |acc| match map.period() {
                Some(p) => {
                    for chunk in g.data().chunks(p) {
                        for (a, &gv) in acc.iter_mut().zip(chunk) {
                            *a += gv;
                        }
                    }
                }
                None => {
                    for (i, &gv) in g.data().iter().enumerate() {
                        acc[map.source_index(i)] += gv;
                    }
                }
            });
        }
        Op::Sum(a) => {
            let gv = g.data()[0];
            elementwise(nodes, grads, a, &Tensor::full(nodes[a].value.shape(), gv), |_| 1.0);
        }
        Op::SumCols(a) => {
            let cols = nodes[a].value.cols();
            accumulate(nodes, grads, a, |acc| {
                for (i, chunk) in acc.chunks_mut(cols).enumerate() {
                    for v in chunk {
                        *v += g.data()[i];
                    }
                }
            });
        }
        Op::Mean(a) => {
            let n = nodes[a].value.len() as f64;
            let gv = g.data()[0] / n;
            elementwise(nodes, grads, a, &Tensor::full(nodes[a].value.shape(), gv), |_| 1.0);
        }
        Op::Square(a) => {
            let av = nodes[a].value.data();
            elementwise(nodes, grads, a, g, |i| 2.0 * av[i]);
        }
        Op::Sqrt(a) => {
            let ov = out.data();
            elementwise(nodes, grads, a, g, |i| 0.5 / ov[i]);
        }
        Op::Exp(a) => {
            let ov = out.data();
            elementwise(nodes, grads, a, g, |i| ov[i]);
        }
        Op::Sin(a) => {
            let av = nodes[a].value.data();
            elementwise(nodes, grads, a, g, |i| av[i].cos());
        }
        Op::Cos(a) => {
            let av = nodes[a].value.data();
            elementwise(nodes, grads, a, g, |i| -av[i].sin());
        }
        Op::Tanh(a) => {
            let ov = out.data();
            elementwise(nodes, grads, a, g, |i| 1.0 - ov[i] * ov[i]);
        }
        Op::Max(a, b) => {
            let (av, bv) = (nodes[a].value.data(), nodes[b].value.data());
            elementwise(nodes, grads, a, g, |i| if av[i] >= bv[i] { 1.0 } else { 0.0 });
            elementwise(nodes, grads, b, g, |i| if av[i] >= bv[i] { 0.0 } else { 1.0 });
        }
        Op::Recip(a) => {
            let ov = out.data();
            elementwise(nodes, grads, a, g, |i| -ov[i] * ov[i]);
        }
        Op::Neg(a) => elementwise(nodes, grads, a, g, |_| -1.0),
        Op::Scale(a, c) => elementwise(nodes, grads, a, g, |_| c),
        Op::Concat(ref parts) => {
            let total = out.cols();
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p].value.cols();
                accumulate(nodes, grads, p, |acc| {
                    for (i, chunk) in acc.chunks_mut(w).enumerate() {
                        let src = &g.data()[i * total + offset..i * total + offset + w];
                        for (a, &s) in chunk.iter_mut().zip(src) {
                            *a += s;
                        }
                    }
                });
                offset += w;
            }
        }
        Op::Slice(a, start, end) => {
            let cols = nodes[a].value.cols();
            let w = end - start;
            accumulate(nodes, grads, a, |acc| {
                for (i, chunk) in acc.chunks_mut(cols).enumerate() {
                    for (a, &s) in chunk[start..end].iter_mut().zip(&g.data()[i * w..(i + 1) * w]) {
                        *a += s;
                    }
                }
            });
        }
    }
}

/// Gradient accumulators produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn wrt(&self, var: Var<'_>) -> &Tensor {
        &self.grads[var.id]
    }

    pub fn take(&mut self, var: Var<'_>) -> Tensor {
        let shape = self.grads[var.id].shape().to_vec();
        std::mem::replace(&mut self.grads[var.id], Tensor::zeros(&shape))
    }

    /// Accumulator of every recorded node, in tape order.
    pub fn all(&self) -> &[Tensor] {
        &self.grads
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_ref(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_ref(self.id).shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, op: Op, f: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Var<'t>> {
        let value = f(&self.tape.value_ref(self.id))?;
        self.tape.push(value, op)
    }

    /// Bring both operands to a common shape, inserting broadcast nodes.
    fn align(self, other: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa == sb {
            return Ok((self, other));
        }
        let rank = sa.len().max(sb.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(&sa), pad(&sb));
        let mut target = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x == y || y == 1 {
                target.push(x);
            } else if x == 1 {
                target.push(y);
            } else {
                return Err(Error::dims("broadcast", &sa, &sb));
            }
        }
        Ok((self.broadcast_to(&target)?, other.broadcast_to(&target)?))
    }

    fn binary(
        self,
        other: Var<'t>,
        op: fn(usize, usize) -> Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let (a, b) = self.align(other)?;
        let value = {
            let (av, bv) = (a.tape.value_ref(a.id), b.tape.value_ref(b.id));
            av.zip_map(&bv, name, f)?
        };
        a.tape.push(value, op(a.id, b.id))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Add, "add", |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Sub, "sub", |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Mul, "mul", |a, b| a * b)
    }

    /// Elementwise maximum; ties route the gradient to `self`.
    pub fn max(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Max, "max", f64::max)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.mul(other.recip()?)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let (a, b) = (self.tape.value_ref(self.id), self.tape.value_ref(other.id));
            a.matmul(&b)?
        };
        self.tape.push(value, Op::MatMul(self.id, other.id))
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t>> {
        if self.shape() == shape {
            return Ok(self);
        }
        let id = self.id;
        self.unary(Op::Broadcast(id), |t| t.broadcast_to(shape))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(self) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(Op::Sum(id), |t| Ok(Tensor::scalar(t.sum())))
    }

    /// Per-row sums of a 2-D tensor, as a `[rows, 1]` column.
    pub fn sum_cols(self) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(Op::SumCols(id), |t| {
            let sums = (0..t.rows())
                .map(|i| {
                    let mut acc = 0.0;
                    for &v in t.row(i) {
                        acc += v;
                    }
                    acc
                })
                .collect();
            Tensor::column(sums)
        })
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(Op::Mean(id), |t| Ok(Tensor::scalar(t.mean())))
    }

    pub fn square(self) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(Op::Square(id), |t| Ok(t.map(|v| v * v)))
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(Op::Sqrt(id), |t| Ok(t.map(f64::sqrt)))
    }

    pub fn exp(self) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(Op::Exp(id), |t| Ok(t.map(f64::exp)))
    }

    pub fn sin(self) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(Op::Sin(id), |t| Ok(t.map(f64::sin)))
    }

    pub fn cos(self) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(Op::Cos(id), |t| Ok(t.map(f64::cos)))
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(Op::Tanh(id), |t| Ok(t.map(f64::tanh)))
    }

    pub fn recip(self) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(Op::Recip(id), |t| Ok(t.map(|v| 1.0 / v)))
    }

    pub fn neg(self) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(Op::Neg(id), |t| Ok(t.map(|v| -v)))
    }

    /// Multiplication by a constant.
    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(Op::Scale(id, c), |t| Ok(t.scale(c)))
    }

    /// `|x|`, expressed as `max(x, -x)`.
    pub fn abs(self) -> Result<Var<'t>> {
        self.max(self.neg()?)
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(Op::Slice(id, start, end), |t| t.slice_cols(start, end))
    }

    /// Concatenate 2-D values along columns.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let tape = first.tape;
        let value = {
            let refs: Vec<_> = parts.iter().map(|p| tape.value_ref(p.id)).collect();
            let tensors: Vec<&Tensor> = refs.iter().map(|r| &**r).collect();
            Tensor::concat_cols(&tensors)?
        };
        tape.push(value, Op::Concat(parts.iter().map(|p| p.id).collect()))
    }
}

/// Fourth-order central-difference gradient of a scalar function, one
/// coordinate at a time: `(-f(x+2h) + 8 f(x+h) - 8 f(x-h) + f(x-2h)) / 12h`.
/// The higher order allows a larger `h`, which keeps cancellation error small
/// when the function value is large.
pub fn finite_difference(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    h: f64,
) -> Result<Tensor> {
    if !(h > 0.0) {
        return Err(Error::contract(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        let mut at = |offset: f64| {
            probe.data_mut()[i] = orig + offset;
            f(&probe)
        };
        let (p2, p1, m1, m2) = (at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
    }
    Ok(grad)
}

/// Largest coordinate-wise relative error between two gradient estimates.
///
/// Coordinates are compared relative to `max(|a|, |b|, floor)` so that
/// near-zero entries do not dominate.
pub fn max_relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
