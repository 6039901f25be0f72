//! Define-by-run reverse-mode autodiff.
//!
//! Every forward pass builds a fresh [`Tape`]. Operations append nodes in
//! execution order, so the node list is already topologically sorted and
//! `backward` is a single reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::{split_axis, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Act(Var, Activation),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    Reduce {
        x: Var,
        axis: usize,
        kind: ReduceKind,
        // flat input index of the winning element, per output element (max only)
        argmax: Vec<usize>,
    },
    SumAll(Var),
    Pool {
        x: Var,
        out_len: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf; `grad` returns dLoss/dparam after `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    ///
    /// Nodes that require grad but were not reached get zeros; constants get `None`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        if !node.requires_grad || !self.backward_done {
            return None;
        }
        let data = self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; node.value.len()]);
        Some(Tensor::new(node.value.shape().to_vec(), data).expect("grad shape"))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Copies the value into a new constant, cutting the gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    // ---- linear algebra ------------------------------------------------------

    /// Matrix product over the last two axes. Rank-3 operands are batched;
    /// a rank-2 operand paired with a rank-3 one is shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let geo = MatMulGeometry::new(&sa, &sb)?;
        let mut out = vec![0.0; geo.batch * geo.m * geo.n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for bi in 0..geo.batch {
                gemm_nn(
                    &da[geo.a_off(bi)..],
                    &db[geo.b_off(bi)..],
                    &mut out[bi * geo.m * geo.n..],
                    geo.m,
                    geo.k,
                    geo.n,
                );
            }
        }
        let t = Tensor::new(geo.out_shape(), out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (batch, r, c) = match shape.as_slice() {
            [r, c] => (1, *r, *c),
            [b, r, c] => (*b, *r, *c),
            _ => return Err(Error::shape("transpose", &shape, &[])),
        };
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        transpose_into(src, &mut out, batch, r, c);
        let mut new_shape = shape.clone();
        let n = new_shape.len();
        new_shape.swap(n - 2, n - 1);
        let t = Tensor::new(new_shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    // ---- elementwise with broadcasting ---------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(ta.shape(), tb.shape())
            .ok_or_else(|| Error::shape(name, ta.shape(), tb.shape()))?;
        let ma = BroadcastMap::new(&out_shape, ta.shape());
        let mb = BroadcastMap::new(&out_shape, tb.shape());
        let n: usize = out_shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let data = (0..n).map(|i| f(da[ma.get(i)], db[mb.get(i)])).collect();
        let t = Tensor::new(out_shape, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, op(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, c), rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v + c);
        let rg = self.rg(&[x]);
        self.push(t, Op::AddConst(x), rg)
    }

    /// `c - x`
    pub fn rsub_scalar(&mut self, c: f64, x: Var) -> Var {
        let n = self.neg(x);
        self.add_scalar(n, c)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let t = self.value(x).map(|v| match kind {
            Activation::Relu => {
                if v > 0.0 {
                    v
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => sigmoid(v),
            Activation::Tanh => v.tanh(),
        });
        let rg = self.rg(&[x]);
        self.push(t, Op::Act(x, kind), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::exp);
        let rg = self.rg(&[x]);
        self.push(t, Op::Exp(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::ln);
        let rg = self.rg(&[x]);
        self.push(t, Op::Log(x), rg)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::sqrt);
        let rg = self.rg(&[x]);
        self.push(t, Op::Sqrt(x), rg)
    }

    // ---- normalizations and reductions ---------------------------------------

    /// Softmax along `axis`, computed after subtracting the per-slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = softmax_values(self.value(x), axis)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax { x, axis }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let src = self.value(x);
        let (outer, len, inner) = split_axis(src.shape(), axis)?;
        let d = src.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for r in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + r;
                let m = (0..len)
                    .map(|i| d[idx(i)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..len).map(|i| (d[idx(i)] - m).exp()).sum::<f64>().ln();
                for i in 0..len {
                    out[idx(i)] = d[idx(i)] - lse;
                }
            }
        }
        let t = Tensor::new(src.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::LogSoftmax { x, axis }, rg))
    }

    /// Reduces along `axis`, dropping it. `Max` sends the gradient to the first maximal entry.
    pub fn reduce(&mut self, x: Var, axis: usize, kind: ReduceKind) -> Result<Var> {
        let src = self.value(x);
        let (outer, len, inner) = split_axis(src.shape(), axis)?;
        let d = src.data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        if kind == ReduceKind::Max {
            argmax.reserve(outer * inner);
        }
        for o in 0..outer {
            for r in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + r;
                out[o * inner + r] = match kind {
                    ReduceKind::Sum => (0..len).map(|i| d[idx(i)]).sum(),
                    ReduceKind::Mean => (0..len).map(|i| d[idx(i)]).sum::<f64>() / len as f64,
                    ReduceKind::Max => {
                        let mut best = idx(0);
                        for i in 1..len {
                            if d[idx(i)] > d[best] {
                                best = idx(i);
                            }
                        }
                        argmax.push(best);
                        d[best]
                    }
                };
            }
        }
        let mut shape = src.shape().to_vec();
        shape.remove(axis);
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            Op::Reduce {
                x,
                axis,
                kind,
                argmax,
            },
            rg,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).data().iter().sum());
        let rg = self.rg(&[x]);
        self.push(t, Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Adaptive average pooling over the last axis.
    ///
    /// Output element `i` averages input indices `[floor(i*n/out), floor((i+1)*n/out))`.
    pub fn adaptive_avg_pool(&mut self, x: Var, out_len: usize) -> Result<Var> {
        let src = self.value(x);
        let shape = src.shape().to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| Error::InvalidArgument("cannot pool a scalar".into()))?;
        if out_len < 1 || out_len > n {
            return Err(Error::InvalidArgument(format!(
                "pool output length {out_len} must lie in [1, {n}]"
            )));
        }
        let rows = src.len() / n;
        let d = src.data();
        let mut out = Vec::with_capacity(rows * out_len);
        for row in 0..rows {
            let base = row * n;
            for i in 0..out_len {
                let (lo, hi) = pool_window(i, n, out_len);
                let s: f64 = d[base + lo..base + hi].iter().sum();
                out.push(s / (hi - lo) as f64);
            }
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = out_len;
        let t = Tensor::new(out_shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Pool { x, out_len }, rg))
    }

    // ---- slicing ---------------------------------------------------------------

    /// Slice `[start, start + len)` along `axis`; the axis is kept.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let src = self.value(x);
        let (outer, full, inner) = split_axis(src.shape(), axis)?;
        if len == 0 || start + len > full {
            return Err(Error::InvalidArgument(format!(
                "narrow [{start}, {}) exceeds axis {axis} of length {full}",
                start + len
            )));
        }
        let d = src.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = src.shape().to_vec();
        shape[axis] = len;
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Narrow { x, axis, start }, rg))
    }

    /// `narrow` of length one followed by dropping the axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let n = self.narrow(x, axis, index, 1)?;
        let mut shape = self.shape(n).to_vec();
        shape.remove(axis);
        self.reshape(n, &shape)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let base = self.shape(first).to_vec();
        let (outer, _, inner) = split_axis(&base, axis)?;
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let len = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(xs);
        Ok(self.push(
            t,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Stacks equally shaped tensors along a new axis.
    pub fn stack(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let mut expanded = Vec::with_capacity(xs.len());
        for &v in xs {
            let mut shape = self.shape(v).to_vec();
            if axis > shape.len() {
                return Err(Error::Axis {
                    axis,
                    rank: shape.len() + 1,
                });
            }
            shape.insert(axis, 1);
            expanded.push(self.reshape(v, &shape)?);
        }
        self.concat(&expanded, axis)
    }

    // ---- backward --------------------------------------------------------------

    /// Populates gradients of `loss` with respect to every node that requires them.
    ///
    /// A tape supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward("backward already ran on this tape".into()));
        }
        if self.nodes.is_empty() {
            return Err(Error::Backward("tape is empty".into()));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::Backward(format!(
                "loss must have exactly one element, got shape {:?}",
                lv.shape()
            )));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            if self.nodes[id].requires_grad {
                self.backprop_node(id, &g);
            }
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, id: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[id];
        let out = &node.value;
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                let n = nodes[v.0].value.len();
                grads[v.0].get_or_insert_with(|| vec![0.0; n])
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let geo = MatMulGeometry::new(val(a).shape(), val(b).shape()).expect("recorded");
                let stride = geo.m * geo.n;
                if wants(a) {
                    let db = val(b).data();
                    let ga = acc!(a);
                    for bi in 0..geo.batch {
                        // dA = dC · Bᵀ
                        gemm_nt(
                            &g[bi * stride..],
                            &db[geo.b_off(bi)..],
                            &mut ga[geo.a_off(bi)..],
                            geo.m,
                            geo.k,
                            geo.n,
                        );
                    }
                }
                if wants(b) {
                    let da = val(a).data();
                    let gb = acc!(b);
                    for bi in 0..geo.batch {
                        // dB = Aᵀ · dC
                        gemm_tn(
                            &da[geo.a_off(bi)..],
                            &g[bi * stride..],
                            &mut gb[geo.b_off(bi)..],
                            geo.m,
                            geo.k,
                            geo.n,
                        );
                    }
                }
            }
            Op::Transpose(x) => {
                let s = out.shape();
                let (batch, r, c) = match s {
                    [r, c] => (1, *r, *c),
                    [b, r, c] => (*b, *r, *c),
                    _ => unreachable!(),
                };
                let mut tmp = vec![0.0; g.len()];
                transpose_into(g, &mut tmp, batch, r, c);
                add_into(acc!(*x), &tmp);
            }
            Op::Reshape(x) => add_into(acc!(*x), g),
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                let (a, b) = (*a, *b);
                if wants(a) {
                    let m = BroadcastMap::new(out.shape(), val(a).shape());
                    let ga = acc!(a);
                    for (i, gi) in g.iter().enumerate() {
                        ga[m.get(i)] += gi;
                    }
                }
                if wants(b) {
                    let m = BroadcastMap::new(out.shape(), val(b).shape());
                    let gb = acc!(b);
                    for (i, gi) in g.iter().enumerate() {
                        gb[m.get(i)] += sign * gi;
                    }
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let (a, b) = (*a, *b);
                let ma = BroadcastMap::new(out.shape(), val(a).shape());
                let mb = BroadcastMap::new(out.shape(), val(b).shape());
                let (da, db) = (val(a).data(), val(b).data());
                if wants(a) {
                    let mut tmp = vec![0.0; da.len()];
                    for (i, gi) in g.iter().enumerate() {
                        let bv = db[mb.get(i)];
                        tmp[ma.get(i)] += if is_div { gi / bv } else { gi * bv };
                    }
                    add_into(acc!(a), &tmp);
                }
                if wants(b) {
                    let mut tmp = vec![0.0; db.len()];
                    for (i, gi) in g.iter().enumerate() {
                        let (av, bv) = (da[ma.get(i)], db[mb.get(i)]);
                        tmp[mb.get(i)] += if is_div {
                            -gi * av / (bv * bv)
                        } else {
                            gi * av
                        };
                    }
                    add_into(acc!(b), &tmp);
                }
            }
            Op::Scale(x, c) => {
                let gx = acc!(*x);
                for (d, gi) in gx.iter_mut().zip(g) {
                    *d += c * gi;
                }
            }
            Op::AddConst(x) => add_into(acc!(*x), g),
            Op::Act(x, kind) => {
                let (xv, y) = (val(*x).data(), out.data());
                let gx = acc!(*x);
                for i in 0..g.len() {
                    let local = match kind {
                        Activation::Relu => {
                            if xv[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Activation::Sigmoid => y[i] * (1.0 - y[i]),
                        Activation::Tanh => 1.0 - y[i] * y[i],
                    };
                    gx[i] += g[i] * local;
                }
            }
            Op::Exp(x) => {
                let y = out.data();
                let gx = acc!(*x);
                for i in 0..g.len() {
                    gx[i] += g[i] * y[i];
                }
            }
            Op::Log(x) => {
                let xv = val(*x).data();
                let gx = acc!(*x);
                for i in 0..g.len() {
                    gx[i] += g[i] / xv[i];
                }
            }
            Op::Sqrt(x) => {
                let y = out.data();
                let gx = acc!(*x);
                for i in 0..g.len() {
                    gx[i] += g[i] / (2.0 * y[i]);
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(out.shape(), *axis).expect("recorded");
                let y = out.data();
                let gx = acc!(*x);
                for o in 0..outer {
                    for r in 0..inner {
                        let idx = |i: usize| (o * len + i) * inner + r;
                        let dot: f64 = (0..len).map(|i| g[idx(i)] * y[idx(i)]).sum();
                        for i in 0..len {
                            gx[idx(i)] += y[idx(i)] * (g[idx(i)] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = split_axis(out.shape(), *axis).expect("recorded");
                let y = out.data();
                let gx = acc!(*x);
                for o in 0..outer {
                    for r in 0..inner {
                        let idx = |i: usize| (o * len + i) * inner + r;
                        let total: f64 = (0..len).map(|i| g[idx(i)]).sum();
                        for i in 0..len {
                            gx[idx(i)] += g[idx(i)] - y[idx(i)].exp() * total;
                        }
                    }
                }
            }
            Op::Reduce {
                x,
                axis,
                kind,
                argmax,
            } => {
                let (outer, len, inner) = split_axis(val(*x).shape(), *axis).expect("recorded");
                let gx = acc!(*x);
                match kind {
                    ReduceKind::Max => {
                        for (j, &src) in argmax.iter().enumerate() {
                            gx[src] += g[j];
                        }
                    }
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let f = if *kind == ReduceKind::Mean {
                            1.0 / len as f64
                        } else {
                            1.0
                        };
                        for o in 0..outer {
                            for r in 0..inner {
                                let gj = g[o * inner + r] * f;
                                for i in 0..len {
                                    gx[(o * len + i) * inner + r] += gj;
                                }
                            }
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                let gx = acc!(*x);
                for d in gx.iter_mut() {
                    *d += g[0];
                }
            }
            Op::Pool { x, out_len } => {
                let n = *val(*x).shape().last().unwrap();
                let rows = val(*x).len() / n;
                let gx = acc!(*x);
                for row in 0..rows {
                    for i in 0..*out_len {
                        let (lo, hi) = pool_window(i, n, *out_len);
                        let share = g[row * out_len + i] / (hi - lo) as f64;
                        for d in &mut gx[row * n + lo..row * n + hi] {
                            *d += share;
                        }
                    }
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, full, inner) = split_axis(val(*x).shape(), *axis).expect("recorded");
                let len = out.shape()[*axis];
                let gx = acc!(*x);
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    add_into(&mut gx[dst..dst + len * inner], &g[src..src + len * inner]);
                }
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis).expect("recorded");
                let mut offset = 0;
                for &v in xs {
                    let len = val(v).shape()[*axis];
                    if wants(v) {
                        let gv = acc!(v);
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            add_into(
                                &mut gv[o * len * inner..(o + 1) * len * inner],
                                &g[src..src + len * inner],
                            );
                        }
                    }
                    offset += len;
                }
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_values(src: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = split_axis(src.shape(), axis)?;
    let d = src.data();
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for r in 0..inner {
            let idx = |i: usize| (o * len + i) * inner + r;
            let m = (0..len)
                .map(|i| d[idx(i)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for i in 0..len {
                let e = (d[idx(i)] - m).exp();
                out[idx(i)] = e;
                z += e;
            }
            for i in 0..len {
                out[idx(i)] /= z;
            }
        }
    }
    Tensor::new(src.shape().to_vec(), out)
}

fn pool_window(i: usize, n: usize, out_len: usize) -> (usize, usize) {
    (i * n / out_len, (i + 1) * n / out_len)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn transpose_into(src: &[f64], dst: &mut [f64], batch: usize, r: usize, c: usize) {
    for b in 0..batch {
        let off = b * r * c;
        for i in 0..r {
            for j in 0..c {
                dst[off + j * r + i] = src[off + i * c + j];
            }
        }
    }
}

/// out[m×n] += a[m×k] · b[k×n]
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m×k] += g[m×n] · b[k×n]ᵀ
fn gemm_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// out[k×n] += a[m×k]ᵀ · g[m×n]
fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

struct MatMulGeometry {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
}

impl MatMulGeometry {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        let err = || Error::shape("matmul", sa, sb);
        let (ab, m, ka) = match sa {
            [m, k] => (None, *m, *k),
            [b, m, k] => (Some(*b), *m, *k),
            _ => return Err(err()),
        };
        let (bb, kb, n) = match sb {
            [k, n] => (None, *k, *n),
            [b, k, n] => (Some(*b), *k, *n),
            _ => return Err(err()),
        };
        if ka != kb {
            return Err(err());
        }
        let batch = match (ab, bb) {
            (Some(x), Some(y)) if x != y => return Err(err()),
            (Some(x), _) | (None, Some(x)) => x,
            (None, None) => 1,
        };
        Ok(MatMulGeometry {
            batch,
            m,
            k: ka,
            n,
            a_batched: ab.is_some(),
            b_batched: bb.is_some(),
        })
    }

    fn a_off(&self, bi: usize) -> usize {
        if self.a_batched {
            bi * self.m * self.k
        } else {
            0
        }
    }

    fn b_off(&self, bi: usize) -> usize {
        if self.b_batched {
            bi * self.k * self.n
        } else {
            0
        }
    }

    fn out_shape(&self) -> Vec<usize> {
        if self.a_batched || self.b_batched {
            vec![self.batch, self.m, self.n]
        } else {
            vec![self.m, self.n]
        }
    }
}

/// Right-aligned broadcasting where a dimension of 1 (or a missing one) stretches.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Maps flat indices of a broadcast output onto flat indices of one operand.
enum BroadcastMap {
    Identity,
    Table(Vec<usize>),
}

impl BroadcastMap {
    fn new(out: &[usize], input: &[usize]) -> Self {
        if out == input {
            return BroadcastMap::Identity;
        }
        let rank = out.len();
        let pad = rank - input.len();
        // input strides, zero along broadcast axes
        let mut strides = vec![0usize; rank];
        let mut s = 1;
        for i in (0..rank).rev() {
            if i >= pad {
                let d = input[i - pad];
                strides[i] = if d == 1 { 0 } else { s };
                s *= d;
            }
        }
        let n: usize = out.iter().product();
        let mut table = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        for _ in 0..n {
            table.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < out[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        BroadcastMap::Table(table)
    }

    #[inline]
    fn get(&self, i: usize) -> usize {
        match self {
            BroadcastMap::Identity => i,
            BroadcastMap::Table(t) => t[i],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = b[0].len();
        a.iter()
            .map(|row| {
                (0..n)
                    .map(|j| row.iter().enumerate().map(|(p, x)| x * b[p][j]).sum())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn matmul_identity_and_product() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let i = tape.constant(Tensor::identity(2));
        let c = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

        let b = tape.constant(Tensor::from_rows(&[&[5.0], &[6.0]]));
        let c = tape.matmul(a, b).unwrap();
        let oracle = naive_matmul(&[vec![1.0, 2.0], vec![3.0, 4.0]], &[vec![5.0], vec![6.0]]);
        assert_eq!(oracle, vec![vec![17.0], vec![39.0]]);
        assert_eq!(tape.shape(c), &[2, 1]);
        assert_eq!(tape.value(c).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_zero_and_mismatch() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::full(&[3, 4], 7.5));
        let c = tape.matmul(z, b).unwrap();
        assert!(tape.value(c).data().iter().all(|&v| v == 0.0));

        let err = tape.matmul(z, z).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn batched_matmul_shares_rank2_operand() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::identity(2));
        let x = tape.constant(Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.matmul(a, x).unwrap();
        assert_eq!(tape.shape(y), &[2, 2, 1]);
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let s = tape.softmax(x, 0).unwrap();
        for &v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let x = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        let s = tape.softmax(x, 0).unwrap();
        let e = std::f64::consts::E;
        let oracle = [e / (e + 1.0), 1.0 / (e + 1.0)];
        assert!((oracle[0] - 0.73106).abs() < 1e-5);
        for (v, o) in tape.value(s).data().iter().zip(oracle) {
            assert!((v - o).abs() < 1e-15);
        }

        let x = tape.constant(Tensor::vector(vec![1000.0, 0.0]));
        let s = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 0.0]);

        assert!(matches!(tape.softmax(x, 1), Err(Error::Axis { .. })));
    }

    #[test]
    fn activation_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![-3.0, 2.0, 0.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 2.0, 0.0]);
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s).data()[2], 0.5);
        let t = tape.tanh(x);
        assert_eq!(tape.value(t).data()[2], 0.0);
    }

    #[test]
    fn reduce_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![2.0, 4.0, 6.0]));
        let m = tape.reduce(x, 0, ReduceKind::Mean).unwrap();
        assert_eq!(tape.value(m).item(), 4.0);
        assert_eq!(tape.shape(m), &[] as &[usize]);

        let x = tape.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let s = tape.reduce(x, 0, ReduceKind::Sum).unwrap();
        assert_eq!(tape.value(s).data(), &[4.0, 6.0]);
        assert!(tape.reduce(x, 2, ReduceKind::Sum).is_err());
    }

    #[test]
    fn max_routes_gradient_to_first_tie() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 5.0, 5.0]));
        let m = tape.reduce(x, 0, ReduceKind::Max).unwrap();
        assert_eq!(tape.value(m).item(), 5.0);
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn pool_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]));
        let p = tape.adaptive_avg_pool(x, 2).unwrap();
        assert_eq!(tape.value(p).data(), &[1.5, 3.5]);
        let p = tape.adaptive_avg_pool(x, 4).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        // windows by hand: i=0 -> [0,1), i=1 -> [1,3)
        let x3 = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let p = tape.adaptive_avg_pool(x3, 2).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.5]);

        assert!(tape.adaptive_avg_pool(x3, 0).is_err());
        assert!(tape.adaptive_avg_pool(x3, 4).is_err());
    }

    #[test]
    fn backward_simple_cases() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::vector(vec![2.0, -1.0, 0.5]));
        let x = tape.param(Tensor::vector(vec![1.0, 1.0, 1.0]));
        let p = tape.mul(w, x).unwrap();
        let l = tape.sum_all(p);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -1.0, 0.5]);
        assert!(tape.grad(w).is_none());

        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(5.0));
        let d = tape.add_scalar(x, -3.0);
        let l = tape.mul(d, d).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 4.0);
    }

    #[test]
    fn backward_rejects_non_scalar_and_repeats() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Backward(_))));
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Backward(_))));
        assert!(Tape::new().backward(Var(0)).is_err());
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1], &[1, 4]), Some(vec![2, 4]));
        assert_eq!(broadcast_shape(&[], &[2, 2]), Some(vec![2, 2]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
    }

    #[test]
    fn concat_and_narrow_roundtrip() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap());
        let a = tape.narrow(x, 1, 0, 1).unwrap();
        let b = tape.narrow(x, 1, 1, 2).unwrap();
        let y = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let s = tape.stack(&[a, a], 0).unwrap();
        assert_eq!(tape.shape(s), &[2, 2, 1]);
    }
}
