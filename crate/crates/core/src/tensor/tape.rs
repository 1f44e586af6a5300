use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::conv::{self, ConvGeom};
use super::kernels::{self, broadcast_shape, broadcast_strides, for_each_broadcast, gemm, unbroadcast};
use super::{axis_split, Tensor, STD_EPS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    /// Population standard deviation with [`STD_EPS`] under the root.
    Std,
    /// Gradient flows to the first maximal element only.
    Max,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Relu,
    Sigmoid,
    Exp,
    Ln,
    Powf(f64),
    Scale(f64),
    Shift(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Binary(BinaryOp, usize, usize),
    Unary(Unary, usize),
    Softmax { x: usize, axis: usize, log: bool },
    Reduce {
        x: usize,
        axis: usize,
        kind: Reduce,
        argmax: Vec<usize>,
    },
    Reshape(usize),
    Slice { x: usize, axis: usize, start: usize },
    Concat { xs: Vec<usize>, axis: usize },
    Conv2d {
        x: usize,
        w: usize,
        geom: ConvGeom,
        cols: Rc<Vec<f64>>,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    /// Accumulated gradients of leaves, indexed by node id.
    leaf_grads: Vec<Option<Tensor>>,
}

/// Records operations in execution order; node ids are therefore a
/// topological order and backward simply walks them in reverse.
///
/// A tape is single-threaded. Independent tapes can run on different threads.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
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

    /// Records a constant input.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.leaf(t, false)
    }

    /// Records a leaf whose gradient is collected by [`Tape::backward`].
    pub fn param(&self, t: Tensor) -> Var<'_> {
        self.leaf(t, true)
    }

    pub fn leaf(&self, t: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        #[cfg(debug_assertions)]
        if !matches!(op, Op::Leaf) {
            let finite_inputs = op_inputs(&op).iter().all(|&i| inner.nodes[i].value.is_finite());
            debug_assert!(
                !finite_inputs || value.is_finite(),
                "non-finite output from {op:?} on finite inputs"
            );
        }
        inner.nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        inner.leaf_grads.push(None);
        Var {
            tape: self,
            id: inner.nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.inner.borrow().nodes[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&self) {
        for g in &mut self.inner.borrow_mut().leaf_grads {
            *g = None;
        }
    }

    /// Back-propagates from a scalar `loss`, adding into the gradient of
    /// every leaf that requires one. Repeated calls accumulate.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        let Inner { nodes, leaf_grads } = &mut *inner;
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        if !nodes[loss.id].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let slot = &mut leaf_grads[id];
                match slot {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => *slot = Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
                }
                continue;
            }
            for (input, gi) in input_grads(nodes, id, &g) {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(gi),
                }
            }
        }
        Ok(())
    }
}

fn op_inputs(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::Binary(_, a, b) => vec![*a, *b],
        Op::Conv2d { x, w, .. } => vec![*x, *w],
        Op::Transpose(x) | Op::Unary(_, x) | Op::Reshape(x) => vec![*x],
        Op::Softmax { x, .. } | Op::Reduce { x, .. } | Op::Slice { x, .. } => vec![*x],
        Op::Concat { xs, .. } => xs.clone(),
    }
}

/// Vector-Jacobian products of node `id` for upstream gradient `g`.
fn input_grads(nodes: &[Node], id: usize, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
    let out = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    let needs = |i: usize| nodes[i].requires_grad;
    match &nodes[id].op {
        Op::Leaf => vec![],
        &Op::MatMul(a, b) => {
            let (m, k) = (val(a).shape()[0], val(a).shape()[1]);
            let n = val(b).shape()[1];
            let mut res = Vec::new();
            if needs(a) {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, false, val(b).data(), true, &mut ga, false);
                res.push((a, ga));
            }
            if needs(b) {
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, val(a).data(), true, g, false, &mut gb, false);
                res.push((b, gb));
            }
            res
        }
        &Op::Transpose(x) => {
            let (r, c) = (val(x).shape()[0], val(x).shape()[1]);
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    gx[i * c + j] = g[j * r + i];
                }
            }
            vec![(x, gx)]
        }
        &Op::Binary(op, a, b) => {
            let (va, vb) = (val(a), val(b));
            let shape = out.shape();
            let sa = broadcast_strides(va.shape(), shape);
            let sb = broadcast_strides(vb.shape(), shape);
            let (da, db) = (va.data(), vb.data());
            let mut ga = vec![0.0; out.numel()];
            let mut gb = vec![0.0; out.numel()];
            for_each_broadcast(shape, &sa, &sb, |o, ia, ib| {
                let (x, y) = (da[ia], db[ib]);
                let (dx, dy) = match op {
                    BinaryOp::Add => (1.0, 1.0),
                    BinaryOp::Sub => (1.0, -1.0),
                    BinaryOp::Mul => (y, x),
                    BinaryOp::Div => (1.0 / y, -x / (y * y)),
                };
                ga[o] = g[o] * dx;
                gb[o] = g[o] * dy;
            });
            vec![
                (a, unbroadcast(&ga, shape, va.shape())),
                (b, unbroadcast(&gb, shape, vb.shape())),
            ]
        }
        &Op::Unary(u, x) => {
            let (xv, yv) = (val(x).data(), out.data());
            let gx = g
                .iter()
                .zip(xv.iter().zip(yv))
                .map(|(&g, (&x, &y))| {
                    g * match u {
                        Unary::Relu => f64::from(u8::from(x > 0.0)),
                        Unary::Sigmoid => y * (1.0 - y),
                        Unary::Exp => y,
                        Unary::Ln => 1.0 / x,
                        Unary::Powf(p) => p * x.powf(p - 1.0),
                        Unary::Scale(c) => c,
                        Unary::Shift(_) => 1.0,
                    }
                })
                .collect();
            vec![(x, gx)]
        }
        &Op::Softmax { x, axis, log } => {
            let (outer, n, inner) = axis_split(out.shape(), axis);
            let y = out.data();
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * n * inner + j * inner + i;
                    if log {
                        let gsum: f64 = (0..n).map(|j| g[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] = g[at(j)] - y[at(j)].exp() * gsum;
                        }
                    } else {
                        let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
            vec![(x, gx)]
        }
        Op::Reduce {
            x,
            axis,
            kind,
            argmax,
        } => {
            let xv = val(*x);
            let (outer, n, inner) = axis_split(xv.shape(), *axis);
            let xd = xv.data();
            let yd = out.data();
            let mut gx = vec![0.0; xd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let r = o * inner + i;
                    let at = |j: usize| o * n * inner + j * inner + i;
                    match kind {
                        Reduce::Sum => (0..n).for_each(|j| gx[at(j)] = g[r]),
                        Reduce::Mean => (0..n).for_each(|j| gx[at(j)] = g[r] / n as f64),
                        Reduce::Max => gx[at(argmax[r])] = g[r],
                        Reduce::Std => {
                            let mean = (0..n).map(|j| xd[at(j)]).sum::<f64>() / n as f64;
                            for j in 0..n {
                                gx[at(j)] = g[r] * (xd[at(j)] - mean) / (n as f64 * yd[r]);
                            }
                        }
                    }
                }
            }
            vec![(*x, gx)]
        }
        &Op::Reshape(x) => vec![(x, g.to_vec())],
        &Op::Slice { x, axis, start } => {
            let xs = val(x).shape();
            let (outer, n, inner) = axis_split(xs, axis);
            let len = out.shape()[axis];
            let mut gx = vec![0.0; val(x).numel()];
            for o in 0..outer {
                let src = &g[o * len * inner..(o + 1) * len * inner];
                let dst = o * n * inner + start * inner;
                gx[dst..dst + len * inner].copy_from_slice(src);
            }
            vec![(x, gx)]
        }
        Op::Concat { xs, axis } => {
            let (outer, total, inner) = axis_split(out.shape(), *axis);
            let mut offset = 0;
            xs.iter()
                .map(|&x| {
                    let n = val(x).shape()[*axis];
                    let mut gx = vec![0.0; outer * n * inner];
                    for o in 0..outer {
                        let src = o * total * inner + offset * inner;
                        gx[o * n * inner..(o + 1) * n * inner]
                            .copy_from_slice(&g[src..src + n * inner]);
                    }
                    offset += n;
                    (x, gx)
                })
                .collect()
        }
        Op::Conv2d { x, w, geom, cols } => {
            let mut res = Vec::new();
            if needs(*w) {
                res.push((*w, conv::weight_grad(geom, cols, g)));
            }
            if needs(*x) {
                res.push((*x, conv::input_grad(geom, val(*w).data(), g)));
            }
            res
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self) -> Option<Tensor> {
        self.tape.inner.borrow().leaf_grads[self.id].clone()
    }

    fn record(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'t> {
        let rg = inputs.iter().any(|&i| self.tape.requires_grad(i));
        self.tape.push(value, op, rg)
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars belong to different tapes"
        );
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut c, false);
        Ok(self.record(
            Tensor::from_parts(vec![m, n], c),
            Op::MatMul(self.id, other.id),
            &[self.id, other.id],
        ))
    }

    /// Transpose of a 2-D tensor.
    pub fn t(&self) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() != 2 {
            return Err(Error::shape("transpose", a.shape(), &[]));
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let d = a.data();
        let data = (0..c * r).map(|idx| d[(idx % r) * c + idx / r]).collect();
        Ok(self.record(
            Tensor::from_parts(vec![c, r], data),
            Op::Transpose(self.id),
            &[self.id],
        ))
    }

    /// Element-wise binary op with size-1 broadcasting between equal-rank
    /// operands.
    pub fn binary(&self, other: &Var<'t>, op: BinaryOp) -> Result<Var<'t>> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        };
        let shape = broadcast_shape(a.shape(), b.shape())
            .ok_or_else(|| Error::shape(name, a.shape(), b.shape()))?;
        let sa = broadcast_strides(a.shape(), &shape);
        let sb = broadcast_strides(b.shape(), &shape);
        let (da, db) = (a.data(), b.data());
        let mut out = vec![0.0; shape.iter().product()];
        for_each_broadcast(&shape, &sa, &sb, |o, ia, ib| {
            let (x, y) = (da[ia], db[ib]);
            out[o] = match op {
                BinaryOp::Add => x + y,
                BinaryOp::Sub => x - y,
                BinaryOp::Mul => x * y,
                BinaryOp::Div => x / y,
            };
        });
        Ok(self.record(
            Tensor::from_parts(shape, out),
            Op::Binary(op, self.id, other.id),
            &[self.id, other.id],
        ))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryOp::Add)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryOp::Sub)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryOp::Mul)
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryOp::Div)
    }

    fn unary(&self, u: Unary) -> Var<'t> {
        let x = self.value();
        let y = x.map(|v| match u {
            Unary::Relu => v.max(0.0),
            Unary::Sigmoid => kernels::sigmoid(v),
            Unary::Exp => v.exp(),
            Unary::Ln => v.ln(),
            Unary::Powf(p) => v.powf(p),
            Unary::Scale(c) => v * c,
            Unary::Shift(c) => v + c,
        });
        self.record(y, Op::Unary(u, self.id), &[self.id])
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Unary::Relu)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Unary::Sigmoid)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Unary::Exp)
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(Unary::Ln)
    }

    pub fn powf(&self, p: f64) -> Var<'t> {
        self.unary(Unary::Powf(p))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Unary::Scale(c))
    }

    pub fn shift(&self, c: f64) -> Var<'t> {
        self.unary(Unary::Shift(c))
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> Result<Rc<Tensor>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(Error::shape(op, x.shape(), &[axis]));
        }
        Ok(x)
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        self.softmax_impl(axis, false)
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Var<'t>> {
        self.softmax_impl(axis, true)
    }

    fn softmax_impl(&self, axis: usize, log: bool) -> Result<Var<'t>> {
        let x = self.check_axis("softmax", axis)?;
        let (outer, n, inner) = axis_split(x.shape(), axis);
        let y = kernels::softmax_lanes(x.data(), outer, n, inner, log);
        Ok(self.record(
            Tensor::from_parts(x.shape().to_vec(), y),
            Op::Softmax {
                x: self.id,
                axis,
                log,
            },
            &[self.id],
        ))
    }

    /// Reduces `axis`; with `keep` the axis stays as size 1, otherwise it is
    /// removed (a rank-1 input reduces to shape `[1]`).
    pub fn reduce(&self, axis: usize, kind: Reduce, keep: bool) -> Result<Var<'t>> {
        let x = self.check_axis("reduce", axis)?;
        let (outer, n, inner) = axis_split(x.shape(), axis);
        let d = x.data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        if kind == Reduce::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let r = o * inner + i;
                let lane = (0..n).map(|j| d[o * n * inner + j * inner + i]);
                out[r] = match kind {
                    Reduce::Sum => lane.sum(),
                    Reduce::Mean => lane.sum::<f64>() / n as f64,
                    Reduce::Std => {
                        let mean = lane.clone().sum::<f64>() / n as f64;
                        let var = lane.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                        (var + STD_EPS).sqrt()
                    }
                    Reduce::Max => {
                        let (mut best, mut at) = (f64::NEG_INFINITY, 0);
                        for (j, v) in lane.enumerate() {
                            if v > best {
                                best = v;
                                at = j;
                            }
                        }
                        argmax[r] = at;
                        best
                    }
                };
            }
        }
        let mut shape = x.shape().to_vec();
        if keep {
            shape[axis] = 1;
        } else if shape.len() > 1 {
            shape.remove(axis);
        } else {
            shape = vec![1];
        }
        Ok(self.record(
            Tensor::from_parts(shape, out),
            Op::Reduce {
                x: self.id,
                axis,
                kind,
                argmax,
            },
            &[self.id],
        ))
    }

    /// Sum of every element, shape `[1]`.
    pub fn sum_all(&self) -> Result<Var<'t>> {
        self.reshape(&[self.value().numel()])?.reduce(0, Reduce::Sum, false)
    }

    pub fn mean_all(&self) -> Result<Var<'t>> {
        self.reshape(&[self.value().numel()])?.reduce(0, Reduce::Mean, false)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let y = x.reshape(shape)?;
        Ok(self.record(y, Op::Reshape(self.id), &[self.id]))
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.check_axis("slice", axis)?;
        if len == 0 || start + len > x.shape()[axis] {
            return Err(Error::shape("slice", x.shape(), &[axis, start, len]));
        }
        let (outer, n, inner) = axis_split(x.shape(), axis);
        let d = x.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = o * n * inner + start * inner;
            out.extend_from_slice(&d[from..from + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        Ok(self.record(
            Tensor::from_parts(shape, out),
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
            &[self.id],
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let base = values[0].shape();
        if axis >= base.len() {
            return Err(Error::shape("concat", base, &[axis]));
        }
        for v in &values[1..] {
            let s = v.shape();
            let ok = s.len() == base.len()
                && s.iter().zip(base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", base, s));
            }
        }
        let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
        let (outer, _, inner) = axis_split(base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let n = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base.to_vec();
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(first.record(
            Tensor::from_parts(shape, out),
            Op::Concat {
                xs: ids.clone(),
                axis,
            },
            &ids,
        ))
    }

    /// 2-D convolution over a channels-last `[B, H, W, Cin]` input with a
    /// `[KH, KW, Cin, Cout]` kernel, symmetric zero padding `pad` and equal
    /// stride on both spatial axes.
    pub fn conv2d(&self, weight: &Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        self.same_tape(weight);
        let (x, w) = (self.value(), weight.value());
        let geom = ConvGeom::new(x.shape(), w.shape(), stride, pad)?;
        let cols = conv::im2col(&geom, x.data());
        let out = conv::forward(&geom, &cols, w.data());
        Ok(self.record(
            Tensor::from_parts(geom.out_shape(), out),
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                geom,
                cols: Rc::new(cols),
            },
            &[self.id, weight.id],
        ))
    }
}
