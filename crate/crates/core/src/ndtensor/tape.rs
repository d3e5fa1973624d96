//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation on a [`Tape`] evaluates eagerly and appends a node that
//! remembers its parents. Nodes are only ever appended, so parents always
//! precede children and a single reverse sweep visits them in a valid
//! topological order.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ndtensor::tensor::{ConvGeometry, Lanes};
use crate::ndtensor::{ParamId, ParamStore, ReduceKind, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    /// Subgradient at 0 is 0.
    Relu,
    Log,
    Negate,
    Exp,
    Softplus,
    Scale(f64),
    Shift(f64),
    /// Clamp into `[lo, hi]`; gradient passes only strictly inside.
    Clamp {
        lo: f64,
        hi: f64,
    },
    /// `sign(x) * max(|x|, eps)` with sign(0) = +1; gradient 0 where floored.
    MagnitudeFloor(f64),
}

/// Binary element-wise operations. Operands must have equal shapes, or one of
/// them must hold a single element which is broadcast.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

/// The element-wise operation set as one enum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Unary(Unary),
    Binary(Binary),
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Input,
    Param(ParamId),
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Narrow { x: Var, axis: usize, start: usize },
    Conv2d { x: Var, w: Var, b: Var, stride: usize },
    Softmax(Var, usize),
    Reduce { x: Var, kind: ReduceKind, axis: Option<usize> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    /// `None` only for parameter leaves, whose value lives in the store.
    value: Option<Tensor>,
    requires_grad: bool,
}

/// A recording of one forward computation. Borrow the parameter store for the
/// tape's lifetime; gradients come back as a [`Gradients`] value that the
/// caller folds into the store once the tape is dropped.
#[derive(Debug)]
pub struct Tape<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
}

/// Result of a backward sweep.
#[derive(Debug, Default)]
pub struct Gradients {
    params: Vec<(ParamId, Tensor)>,
    inputs: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(id, t)| (*id, t))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }

    /// Gradient with respect to an [`Tape::input`] leaf.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.inputs.get(&v)
    }
}

/// Which side of every kink (relu, clamp, magnitude floor) each element of a
/// forward pass fell on. Two evaluations with equal patterns used the same
/// smooth branch everywhere.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KinkPattern(Vec<u8>);

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Tape { store: Some(store), nodes: Vec::new() }
    }

    /// A tape with no parameters attached.
    pub fn detached() -> Tape<'static> {
        Tape { store: None, nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.expect("parameter node without a store").value(*id),
            (None, _) => unreachable!("only parameter nodes defer their value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value: Some(value), requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Constant, t, false)
    }

    /// A leaf whose gradient is reported through [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Input, t, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let store = self.store.expect("tape has no parameter store");
        assert!(id.0 < store.len(), "parameter id from a different store");
        self.nodes.push(Node { op: Op::Param(id), value: None, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        match (kind, b) {
            (Elementwise::Unary(op), None) => self.unary(op, a),
            (Elementwise::Binary(op), Some(b)) => self.binary(op, a, b),
            (Elementwise::Unary(_), Some(_)) => Err(Error::structural("unary op given two operands")),
            (Elementwise::Binary(_), None) => Err(Error::structural("binary op given one operand")),
        }
    }

    pub fn unary(&mut self, op: Unary, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if op == Unary::Log {
            if let Some(i) = xv.data().iter().position(|&v| v <= 0.0 || v.is_nan()) {
                return Err(Error::domain(format!("log of nonpositive value at index {i}")));
            }
        }
        let out = xv.map(|v| unary_forward(op, v));
        let rg = self.rg(x);
        Ok(self.push(Op::Unary(op, x), out, rg))
    }

    pub fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let shape = broadcast_shape(av.shape(), bv.shape())?;
        let n: usize = shape.iter().product();
        let (sa, sb) = (av.len() == 1, bv.len() == 1);
        if op == Binary::Div {
            if let Some(i) = (0..n).find(|&i| bv.data()[if sb { 0 } else { i }] == 0.0) {
                return Err(Error::domain(format!("division by zero at index {i}")));
            }
        }
        let data = (0..n)
            .map(|i| {
                let x = av.data()[if sa { 0 } else { i }];
                let y = bv.data()[if sb { 0 } else { i }];
                match op {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                }
            })
            .collect();
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Binary(op, a, b), out, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Negate, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Softplus, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Unary::Scale(c), x)
    }

    pub fn shift(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Unary::Shift(c), x)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), out, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        let rg = self.rg(x);
        Ok(self.push(Op::Transpose(x), out, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Reshape(x), out, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat(&values, axis)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::Concat(parts.to_vec(), axis), out, rg))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).narrow(axis, start, len)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Narrow { x, axis, start }, out, rg))
    }

    pub fn conv2d(&mut self, x: Var, kernels: Var, bias: Var, stride: usize) -> Result<Var> {
        let out = self.value(x).conv2d(self.value(kernels), self.value(bias), stride)?;
        let rg = self.rg(x) || self.rg(kernels) || self.rg(bias);
        Ok(self.push(Op::Conv2d { x, w: kernels, b: bias, stride }, out, rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.value(x).softmax(axis)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Softmax(x, axis), out, rg))
    }

    /// Differentiable reductions. `MaxAbs` is rejected; use
    /// [`Tensor::reduce`] on detached values instead.
    pub fn reduce(&mut self, kind: ReduceKind, x: Var, axis: Option<usize>) -> Result<Var> {
        if kind == ReduceKind::MaxAbs {
            return Err(Error::structural("max-abs reduction is not differentiable"));
        }
        let out = self.value(x).reduce(kind, axis)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Reduce { x, kind, axis }, out, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.reduce(ReduceKind::Sum, x, None)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(ReduceKind::Mean, x, None)
    }

    pub fn kink_pattern(&self) -> KinkPattern {
        let mut bits = Vec::new();
        for node in &self.nodes {
            if let Op::Unary(op, x) = node.op {
                let xs = self.value(x).data();
                match op {
                    Unary::Relu => bits.extend(xs.iter().map(|&v| (v > 0.0) as u8)),
                    Unary::Clamp { lo, hi } => bits.extend(xs.iter().map(|&v| (v < lo) as u8 | ((v > hi) as u8) << 1)),
                    Unary::MagnitudeFloor(eps) => bits.extend(xs.iter().map(|&v| (v.abs() >= eps) as u8)),
                    _ => {}
                }
            }
        }
        KinkPattern(bits)
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::structural(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let y = self.value(Var(i));
            match &node.op {
                Op::Constant => {}
                Op::Input => {
                    out.inputs.insert(Var(i), Tensor::new(y.shape().to_vec(), g)?);
                }
                Op::Param(id) => out.params.push((*id, Tensor::new(y.shape().to_vec(), g)?)),
                Op::Unary(op, x) => {
                    let xv = self.value(*x).data();
                    let yv = y.data();
                    self.accum(&mut grads, *x, |dx| {
                        for k in 0..dx.len() {
                            dx[k] += g[k] * unary_derivative(*op, xv[k], yv[k]);
                        }
                    });
                }
                Op::Binary(op, a, b) => self.binary_backward(&mut grads, *op, *a, *b, &g),
                Op::MatMul(a, b) => {
                    let gt = Tensor::new(y.shape().to_vec(), g)?;
                    if self.rg(*a) {
                        let da = gt.matmul(&self.value(*b).transpose()?)?;
                        self.accum(&mut grads, *a, |dx| add_into(dx, da.data()));
                    }
                    if self.rg(*b) {
                        let db = self.value(*a).transpose()?.matmul(&gt)?;
                        self.accum(&mut grads, *b, |dx| add_into(dx, db.data()));
                    }
                }
                Op::Transpose(x) => {
                    let gt = Tensor::new(y.shape().to_vec(), g)?.transpose()?;
                    self.accum(&mut grads, *x, |dx| add_into(dx, gt.data()));
                }
                Op::Reshape(x) => self.accum(&mut grads, *x, |dx| add_into(dx, &g)),
                Op::Concat(parts, axis) => {
                    let gt = Tensor::new(y.shape().to_vec(), g)?;
                    let mut start = 0;
                    for &p in parts {
                        let len = self.shape(p)[*axis];
                        if self.rg(p) {
                            let piece = gt.narrow(*axis, start, len)?;
                            self.accum(&mut grads, p, |dx| add_into(dx, piece.data()));
                        }
                        start += len;
                    }
                }
                Op::Narrow { x, axis, start } => {
                    let xs = self.shape(*x);
                    let outer: usize = xs[..*axis].iter().product();
                    let inner: usize = xs[axis + 1..].iter().product();
                    let full = xs[*axis] * inner;
                    let block = y.shape()[*axis] * inner;
                    self.accum(&mut grads, *x, |dx| {
                        for o in 0..outer {
                            let base = o * full + start * inner;
                            add_into(&mut dx[base..base + block], &g[o * block..(o + 1) * block]);
                        }
                    });
                }
                Op::Conv2d { x, w, b, stride } => self.conv_backward(&mut grads, *x, *w, *b, *stride, &g)?,
                Op::Softmax(x, axis) => {
                    let yv = y.data();
                    let mut dx = vec![0.0; yv.len()];
                    Lanes::new(y.shape(), *axis)?.for_each(|idx| {
                        let dot: f64 = idx.clone().map(|k| g[k] * yv[k]).sum();
                        for k in idx {
                            dx[k] = yv[k] * (g[k] - dot);
                        }
                    });
                    self.accum(&mut grads, *x, |acc| add_into(acc, &dx));
                }
                Op::Reduce { x, kind, axis } => {
                    let xs = self.shape(*x).to_vec();
                    let scale = |n: usize| if *kind == ReduceKind::Mean { 1.0 / n as f64 } else { 1.0 };
                    match axis {
                        None => {
                            let n: usize = xs.iter().product();
                            let v = g[0] * scale(n);
                            self.accum(&mut grads, *x, |dx| dx.iter_mut().for_each(|d| *d += v));
                        }
                        Some(axis) => {
                            let s = scale(xs[*axis]);
                            let lanes = Lanes::new(&xs, *axis)?;
                            self.accum(&mut grads, *x, |dx| {
                                let mut lane = 0;
                                lanes.for_each(|idx| {
                                    for k in idx {
                                        dx[k] += g[lane] * s;
                                    }
                                    lane += 1;
                                });
                            });
                        }
                    }
                }
            }
        }
        out.params.sort_by_key(|(id, _)| *id);
        // Merge repeated uses of the same parameter leaf.
        let mut merged: Vec<(ParamId, Tensor)> = Vec::with_capacity(out.params.len());
        for (id, t) in out.params.drain(..) {
            match merged.last_mut() {
                Some((last, acc)) if *last == id => add_into(acc.data_mut(), t.data()),
                _ => merged.push((id, t)),
            }
        }
        out.params = merged;
        Ok(out)
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.value(v).len()]);
        f(slot);
    }

    fn binary_backward(&self, grads: &mut [Option<Vec<f64>>], op: Binary, a: Var, b: Var, g: &[f64]) {
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let (sa, sb) = (av.len() == 1 && g.len() > 1, bv.len() == 1 && g.len() > 1);
        let at = |k: usize| av[if sa { 0 } else { k }];
        let bt = |k: usize| bv[if sb { 0 } else { k }];
        let index = |scalar: bool, k: usize| if scalar { 0 } else { k };
        self.accum(grads, a, |da| {
            for k in 0..g.len() {
                da[index(sa, k)] += match op {
                    Binary::Add | Binary::Sub => g[k],
                    Binary::Mul => g[k] * bt(k),
                    Binary::Div => g[k] / bt(k),
                };
            }
        });
        self.accum(grads, b, |db| {
            for k in 0..g.len() {
                db[index(sb, k)] += match op {
                    Binary::Add => g[k],
                    Binary::Sub => -g[k],
                    Binary::Mul => g[k] * at(k),
                    Binary::Div => -g[k] * at(k) / (bt(k) * bt(k)),
                };
            }
        });
    }

    fn conv_backward(
        &self,
        grads: &mut [Option<Vec<f64>>],
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        g: &[f64],
    ) -> Result<()> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let geo = ConvGeometry::new(xv.shape(), wv.shape(), bv.shape(), stride)?;
        let plane = geo.oh * geo.ow;
        self.accum(grads, b, |db| {
            for co in 0..geo.cout {
                db[co] += g[co * plane..(co + 1) * plane].iter().sum::<f64>();
            }
        });
        let (xd, wd) = (xv.data(), wv.data());
        self.accum(grads, w, |dw| {
            for co in 0..geo.cout {
                for ci in 0..geo.cin {
                    for ki in 0..geo.k {
                        for kj in 0..geo.k {
                            let mut acc = 0.0;
                            for oi in 0..geo.oh {
                                let in_row = geo.input_index(ci, oi * stride + ki, kj);
                                let g_row = &g[co * plane + oi * geo.ow..co * plane + (oi + 1) * geo.ow];
                                for (oj, gv) in g_row.iter().enumerate() {
                                    acc += gv * xd[in_row + oj * stride];
                                }
                            }
                            dw[geo.kernel_index(co, ci, ki, kj)] += acc;
                        }
                    }
                }
            }
        });
        self.accum(grads, x, |dx| {
            for co in 0..geo.cout {
                for ci in 0..geo.cin {
                    for ki in 0..geo.k {
                        for kj in 0..geo.k {
                            let wv = wd[geo.kernel_index(co, ci, ki, kj)];
                            for oi in 0..geo.oh {
                                let in_row = geo.input_index(ci, oi * stride + ki, kj);
                                for oj in 0..geo.ow {
                                    dx[in_row + oj * stride] += wv * g[co * plane + oi * geo.ow + oj];
                                }
                            }
                        }
                    }
                }
            }
        });
        Ok(())
    }
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let (na, nb): (usize, usize) = (a.iter().product(), b.iter().product());
    if a == b || (nb == 1 && (na != 1 || a.len() >= b.len())) {
        Ok(a.to_vec())
    } else if na == 1 {
        Ok(b.to_vec())
    } else {
        Err(Error::structural(format!("shapes {a:?} and {b:?} do not match")))
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

pub(crate) fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

fn unary_forward(op: Unary, v: f64) -> f64 {
    match op {
        Unary::Sigmoid => sigmoid(v),
        Unary::Tanh => v.tanh(),
        Unary::Relu => v.max(0.0),
        Unary::Log => v.ln(),
        Unary::Negate => -v,
        Unary::Exp => v.exp(),
        Unary::Softplus => softplus(v),
        Unary::Scale(c) => c * v,
        Unary::Shift(c) => v + c,
        Unary::Clamp { lo, hi } => v.clamp(lo, hi),
        Unary::MagnitudeFloor(eps) => {
            if v.abs() >= eps {
                v
            } else if v < 0.0 {
                -eps
            } else {
                eps
            }
        }
    }
}

fn unary_derivative(op: Unary, x: f64, y: f64) -> f64 {
    match op {
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Tanh => 1.0 - y * y,
        Unary::Relu => (x > 0.0) as u8 as f64,
        Unary::Log => 1.0 / x,
        Unary::Negate => -1.0,
        Unary::Exp => y,
        Unary::Softplus => sigmoid(x),
        Unary::Scale(c) => c,
        Unary::Shift(_) => 1.0,
        Unary::Clamp { lo, hi } => (x > lo && x < hi) as u8 as f64,
        Unary::MagnitudeFloor(eps) => (x.abs() >= eps) as u8 as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trivial_elementwise_values() {
        let mut tape = Tape::detached();
        let z = tape.constant(Tensor::vector(vec![0.0]));
        let s = tape.sigmoid(z).unwrap();
        let t = tape.tanh(z).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5]);
        assert_eq!(tape.value(t).data(), &[0.0]);
        let a = tape.constant(Tensor::vector(vec![1.0, 4.0]));
        let b = tape.constant(Tensor::vector(vec![2.0, 2.0]));
        let q = tape.div(a, b).unwrap();
        assert_eq!(tape.value(q).data(), &[0.5, 2.0]);
    }

    #[test]
    fn domain_errors_name_the_index() {
        let mut tape = Tape::detached();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let b = tape.constant(Tensor::vector(vec![1.0, 0.0, 1.0]));
        match tape.div(a, b) {
            Err(Error::Domain(msg)) => assert!(msg.contains("index 1"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
        let c = tape.constant(Tensor::vector(vec![1.0, 2.0, -3.0]));
        match tape.log(c) {
            Err(Error::Domain(msg)) => assert!(msg.contains("index 2"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_is_structural() {
        let mut tape = Tape::detached();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(tape.add(a, b), Err(Error::Structural(_))));
        assert!(matches!(tape.elementwise(Elementwise::Binary(Binary::Add), a, None), Err(Error::Structural(_))));
    }

    #[test]
    fn scalar_broadcast_both_sides() {
        let mut tape = Tape::detached();
        let x = tape.input(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = tape.input(Tensor::scalar(2.0));
        let y = tape.mul(s, x).unwrap();
        let z = tape.sub(y, s).unwrap();
        assert_eq!(tape.value(z).data(), &[0.0, 2.0, 4.0]);
        let loss = tape.sum(z).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[2.0, 2.0, 2.0]);
        // d/ds sum(s*x - s) = sum(x) - 3
        assert_eq!(g.wrt(s).unwrap().data(), &[3.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::detached();
        let x = tape.input(Tensor::vector(vec![0.3, -1.0, 2.0, 5.0]));
        let l = tape.sum(x).unwrap();
        assert_eq!(tape.backward(l).unwrap().wrt(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn square_gradient_is_two_x() {
        let mut tape = Tape::detached();
        let x = tape.input(Tensor::vector(vec![1.0, -2.0]));
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq).unwrap();
        assert_eq!(tape.backward(l).unwrap().wrt(x).unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn non_scalar_seed_rejected() {
        let mut tape = Tape::detached();
        let x = tape.input(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Structural(_))));
    }

    #[test]
    fn max_abs_is_off_tape_only() {
        let mut tape = Tape::detached();
        let x = tape.input(Tensor::vector(vec![1.0, 2.0]));
        assert!(tape.reduce(ReduceKind::MaxAbs, x, None).is_err());
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::detached();
        let x = tape.input(Tensor::vector(vec![-1.0, 0.0, 1.0]));
        let r = tape.relu(x).unwrap();
        let l = tape.sum(r).unwrap();
        assert_eq!(tape.backward(l).unwrap().wrt(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn magnitude_floor_keeps_sign() {
        let mut tape = Tape::detached();
        let x = tape.constant(Tensor::vector(vec![-1e-12, 0.0, 1e-12, -2.0]));
        let y = tape.unary(Unary::MagnitudeFloor(1e-8), x).unwrap();
        assert_eq!(tape.value(y).data(), &[-1e-8, 1e-8, 1e-8, -2.0]);
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn repeated_parameter_use_merges_gradient() {
        let mut store = ParamStore::new();
        let id = store.register("w", Tensor::vector(vec![3.0])).unwrap();
        let mut tape = Tape::new(&store);
        let a = tape.param(id);
        let b = tape.param(id);
        let p = tape.mul(a, b).unwrap();
        let l = tape.sum(p).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.params().count(), 1);
        assert_eq!(g.param(id).unwrap().data(), &[6.0]);
    }
}
