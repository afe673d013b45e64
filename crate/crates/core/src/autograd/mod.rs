//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! A [`Tape`] records every operation of one forward pass. [`Tape::backward`]
//! consumes it, visits each node once in reverse order and returns the
//! gradients of all leaves that require them.

mod conv;
mod shape;

use std::collections::HashMap;

pub use conv::Conv2dParams;
use conv::ConvGeom;
pub(crate) use shape::broadcast_shapes;
use shape::{broadcast_strides, check_axis, split_axis, walk1, walk2};

use crate::error::{Error, Result};
use crate::tensor::{gemm, numel, strides, Element, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op<F: Element> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    MatMul(Var, Var),
    Conv2d { input: Var, weight: Var, geom: ConvGeom },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<F>, rstd: Vec<F> },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<F>, rstd: Vec<F> },
    Softmax { x: Var, axis: usize },
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Sum { x: Var, kept: Vec<usize> },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Expand(Var),
    /// Scalar whose gradient w.r.t. `input` was computed during the forward pass.
    Fused { input: Var, grad: Vec<F> },
}

impl<F: Element> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::LayerNorm { .. } => "layer_norm",
            Op::GroupNorm { .. } => "group_norm",
            Op::Softmax { .. } => "softmax",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Sum { .. } => "sum",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Expand(..) => "expand",
            Op::Fused { .. } => "fused",
        }
    }
}

struct Node<F: Element> {
    shape: Vec<usize>,
    value: Vec<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Append-only record of one forward pass.
pub struct Tape<F: Element> {
    nodes: Vec<Node<F>>,
}

impl<F: Element> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<F: Element> {
    grads: HashMap<usize, Tensor<F>>,
}

impl<F: Element> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(&v.0)
    }

    /// Accumulates the gradient of leaf `v` into `target`'s grad buffer.
    /// Tensors that do not require grad are left alone.
    pub fn write_into(&self, v: Var, target: &mut Tensor<F>) -> Result<()> {
        if !target.requires_grad() {
            return Ok(());
        }
        match self.grads.get(&v.0) {
            Some(g) => target.accumulate_grad(g.data()),
            None => Ok(()),
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn add_into<F: Element>(dst: &mut [F], src: &[F]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

impl<F: Element> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op<F>, inputs: &[Var]) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a copy of `t`; gradients flow to it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<F>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Records `t` as a non-differentiable input.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        let shape = t.shape().to_vec();
        self.nodes.push(Node { shape, value: t.into_data(), op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<F> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape values are well-formed")
    }

    pub fn item(&self, v: Var) -> F {
        self.nodes[v.0].value[0]
    }

    // ---- elementwise ---------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F, op: Op<F>) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = broadcast_shapes(&sa, &sb)?;
        let mut value = vec![F::zero(); numel(&out)];
        if sa == sb {
            let (va, vb) = (self.value(a), self.value(b));
            value.iter_mut().enumerate().for_each(|(i, o)| *o = f(va[i], vb[i]));
        } else {
            let (ba, bb) = (broadcast_strides(&sa, &out), broadcast_strides(&sb, &out));
            let (va, vb) = (self.value(a), self.value(b));
            walk2(&out, &ba, &bb, |o, ia, ib| value[o] = f(va[ia], vb[ib]));
        }
        Ok(self.push(out, value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = F::lit(s);
        let value = self.value(a).iter().map(|&v| v * s).collect();
        self.push(self.shape(a).to_vec(), value, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = F::lit(s);
        let value = self.value(a).iter().map(|&v| v + s).collect();
        self.push(self.shape(a).to_vec(), value, Op::AddScalar(a), &[a])
    }

    fn unary(&mut self, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let value = self.value(a).iter().map(|&v| f(v)).collect();
        self.push(self.shape(a).to_vec(), value, op, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| if v > F::zero() { v } else { F::zero() }, Op::Relu(a))
    }

    /// GELU, tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.tanh(), Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.exp(), Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.ln(), Op::Ln(a))
    }

    // ---- linear algebra ------------------------------------------------

    /// Batched matrix product `[.., m, k] · [.., k, n]` with broadcast batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let plan = MatmulPlan::new(&sa, &sb)?;
        let mut value = vec![F::zero(); numel(&plan.out_shape)];
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k, n) = (plan.m, plan.k, plan.n);
        if plan.flat_b {
            gemm(plan.batch * m, k, n, va, false, vb, false, &mut value, false);
        } else {
            plan.for_each_batch(|o, ia, ib| {
                gemm(
                    m,
                    k,
                    n,
                    &va[ia * m * k..],
                    false,
                    &vb[ib * k * n..],
                    false,
                    &mut value[o * m * n..(o + 1) * m * n],
                    false,
                )
            });
        }
        Ok(self.push(plan.out_shape.clone(), value, Op::MatMul(a, b), &[a, b]))
    }

    /// `x·w + b` over the last axis: `x [.., in]`, `w [in, out]`, `b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, params: Conv2dParams) -> Result<Var> {
        let geom = ConvGeom::resolve(self.shape(input), self.shape(weight), params)?;
        let value = geom.forward(self.value(input), self.value(weight));
        Ok(self.push(geom.out_shape(), value, Op::Conv2d { input, weight, geom }, &[input, weight]))
    }

    // ---- normalization and softmax --------------------------------------

    /// Normalizes over the last axis, then applies `gamma`/`beta` of that extent.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::dim("layer_norm on rank-0 tensor"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim(format!(
                "layer_norm gamma {:?} / beta {:?} must be [{d}]",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let rows = numel(&shape) / d;
        let (xhat, rstd) = normalize_rows(self.value(x), rows, d, F::lit(eps));
        let (g, b) = (self.value(gamma), self.value(beta));
        let value = xhat.iter().enumerate().map(|(i, &v)| v * g[i % d] + b[i % d]).collect();
        Ok(self.push(shape, value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    /// Per-sample group normalization of `[n, c, ..]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::config(format!("group_norm eps must be > 0, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::dim(format!("group_norm expects [n, c, ..], got {shape:?}")));
        }
        let c = shape[1];
        if groups == 0 || !c.is_multiple_of(groups) {
            return Err(Error::config(format!("group_norm: {groups} groups do not divide {c} channels")));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim(format!("group_norm affine parameters must be [{c}]")));
        }
        let spatial: usize = shape[2..].iter().product();
        let rows = shape[0] * groups;
        let (xhat, rstd) = normalize_rows(self.value(x), rows, numel(&shape) / rows, F::lit(eps));
        let (g, b) = (self.value(gamma), self.value(beta));
        let value = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / spatial) % c;
                v * g[ch] + b[ch]
            })
            .collect();
        Ok(self.push(
            shape,
            value,
            Op::GroupNorm { x, gamma, beta, groups, xhat, rstd },
            &[x, gamma, beta],
        ))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(axis, shape.len())?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x);
        let mut value = vec![F::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(F::neg_infinity(), F::max);
                let mut total = F::zero();
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    value[at(j)] = e;
                    total = total + e;
                }
                for j in 0..len {
                    value[at(j)] = value[at(j)] / total;
                }
            }
        }
        Ok(self.push(shape, value, Op::Softmax { x, axis }, &[x]))
    }

    // ---- reductions ----------------------------------------------------

    /// Sums over `axes`; reduced axes are kept as size 1 when `keepdim`.
    pub fn sum(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        for &a in axes {
            check_axis(a, shape.len())?;
        }
        let kept: Vec<usize> =
            shape.iter().enumerate().map(|(i, &d)| if axes.contains(&i) { 1 } else { d }).collect();
        let mut value = vec![F::zero(); numel(&kept)];
        let bs = broadcast_strides(&kept, &shape);
        let src = self.value(x);
        walk1(&shape, &bs, |o, r| value[r] = value[r] + src[o]);
        let out_shape = if keepdim {
            kept.clone()
        } else {
            let s: Vec<usize> =
                shape.iter().enumerate().filter(|(i, _)| !axes.contains(i)).map(|(_, &d)| d).collect();
            if s.is_empty() {
                vec![1]
            } else {
                s
            }
        };
        Ok(self.push(out_shape, value, Op::Sum { x, kept }, &[x]))
    }

    pub fn mean(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let shape = self.shape(x);
        let count: usize = axes.iter().map(|&a| shape.get(a).copied().unwrap_or(1)).product();
        let s = self.sum(x, axes, keepdim)?;
        Ok(self.scale(s, 1.0 / count as f64))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.sum(x, &axes, false).expect("valid axes")
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = numel(self.shape(x));
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    // ---- shape manipulation ----------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(x)) || shape.contains(&0) {
            return Err(Error::dim(format!("cannot reshape {:?} into {shape:?}", self.shape(x))));
        }
        let value = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), &[x]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim(format!("{perm:?} is not a permutation of rank {}", shape.len())));
        }
        let out: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let st = strides(&shape);
        let ps: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
        let src = self.value(x);
        let mut value = vec![F::zero(); src.len()];
        walk1(&out, &ps, |o, i| value[o] = src[i]);
        Ok(self.push(out, value, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::usage("concat of zero inputs"))?;
        let base = self.shape(*first).to_vec();
        check_axis(axis, base.len())?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(Error::dim(format!("concat along {axis}: {base:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let mut out = base.clone();
        out[axis] = total;
        let (outer, _, inner) = split_axis(&out, axis);
        let mut value = Vec::with_capacity(numel(&out));
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                value.extend_from_slice(&self.value(v)[o * len..(o + 1) * len]);
            }
        }
        Ok(self.push(out, value, Op::Concat { inputs: inputs.to_vec(), axis }, inputs))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(axis, shape.len())?;
        if len == 0 || start + len > shape[axis] {
            return Err(Error::dim(format!(
                "slice [{start}, {}) out of range for axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let src = self.value(x);
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            value.extend_from_slice(&src[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut out = shape;
        out[axis] = len;
        Ok(self.push(out, value, Op::Slice { x, axis, start }, &[x]))
    }

    /// Broadcasts `x` to `shape`.
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let own = self.shape(x).to_vec();
        if broadcast_shapes(&own, shape)? != shape {
            return Err(Error::dim(format!("cannot expand {own:?} to {shape:?}")));
        }
        let bs = broadcast_strides(&own, shape);
        let src = self.value(x);
        let mut value = vec![F::zero(); numel(shape)];
        walk1(shape, &bs, |o, i| value[o] = src[i]);
        Ok(self.push(shape.to_vec(), value, Op::Expand(x), &[x]))
    }

    /// Records a scalar `value` with a precomputed gradient w.r.t. `input`.
    pub fn fused_scalar(&mut self, input: Var, value: F, grad: Vec<F>) -> Result<Var> {
        if grad.len() != self.value(input).len() {
            return Err(Error::dim("fused gradient does not match input size"));
        }
        Ok(self.push(vec![1], vec![value], Op::Fused { input, grad }, &[input]))
    }

    // ---- backward ------------------------------------------------------

    /// Backpropagates from scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<F>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        let mut leaves = HashMap::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let t = Tensor::new(node.shape.clone(), g).expect("grad matches value");
                leaves.insert(i, t);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads: leaves })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<F>>], v: Var) -> &'g mut Vec<F> {
        grads[v.0].get_or_insert_with(|| vec![F::zero(); self.nodes[v.0].value.len()])
    }

    /// Adds `g` (shaped like `out`) into the grad of `v`, summing broadcast axes.
    fn accumulate_reduced(&self, grads: &mut [Option<Vec<F>>], v: Var, out: &[usize], g: &[F], mul: Option<(&[F], &[usize])>) {
        if !self.wants(v) {
            return;
        }
        let own = self.nodes[v.0].shape.clone();
        let slot = self.grad_slot(grads, v);
        let sv = broadcast_strides(&own, out);
        match mul {
            None if own == out => add_into(slot, g),
            None => walk1(out, &sv, |o, i| slot[i] = slot[i] + g[o]),
            Some((other, other_shape)) => {
                let so = broadcast_strides(other_shape, out);
                walk2(out, &sv, &so, |o, i, j| slot[i] = slot[i] + g[o] * other[j]);
            }
        }
    }

    fn backward_node(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let out = node.shape.as_slice();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate_reduced(grads, *a, out, g, None);
                self.accumulate_reduced(grads, *b, out, g, None);
            }
            Op::Sub(a, b) => {
                self.accumulate_reduced(grads, *a, out, g, None);
                let neg: Vec<F> = g.iter().map(|&v| -v).collect();
                self.accumulate_reduced(grads, *b, out, &neg, None);
            }
            Op::Mul(a, b) => {
                let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
                self.accumulate_reduced(grads, *a, out, g, Some((&nb.value, &nb.shape)));
                self.accumulate_reduced(grads, *b, out, g, Some((&na.value, &na.shape)));
            }
            Op::Scale(a, s) => {
                let slot = self.grad_slot(grads, *a);
                slot.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v * *s);
            }
            Op::AddScalar(a) | Op::Reshape(a) => add_into(self.grad_slot(grads, *a), g),
            Op::Sigmoid(a) => {
                let y = &node.value;
                let slot = self.grad_slot(grads, *a);
                for i in 0..g.len() {
                    slot[i] = slot[i] + g[i] * y[i] * (F::one() - y[i]);
                }
            }
            Op::Relu(a) => {
                let slot = self.grad_slot(grads, *a);
                for i in 0..g.len() {
                    if node.value[i] > F::zero() {
                        slot[i] = slot[i] + g[i];
                    }
                }
            }
            Op::Gelu(a) => {
                let x = &self.nodes[a.0].value;
                let slot = self.grad_slot(grads, *a);
                for i in 0..g.len() {
                    slot[i] = slot[i] + g[i] * gelu_grad(x[i]);
                }
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let slot = self.grad_slot(grads, *a);
                for i in 0..g.len() {
                    slot[i] = slot[i] + g[i] * (F::one() - y[i] * y[i]);
                }
            }
            Op::Exp(a) => {
                let y = &node.value;
                let slot = self.grad_slot(grads, *a);
                for i in 0..g.len() {
                    slot[i] = slot[i] + g[i] * y[i];
                }
            }
            Op::Ln(a) => {
                let x = &self.nodes[a.0].value;
                let slot = self.grad_slot(grads, *a);
                for i in 0..g.len() {
                    slot[i] = slot[i] + g[i] / x[i];
                }
            }
            Op::MatMul(a, b) => self.backward_matmul(*a, *b, g, grads),
            Op::Conv2d { input, weight, geom } => {
                let (vi, vw) = (&self.nodes[input.0].value, &self.nodes[weight.0].value);
                let mut gi = self.wants(*input).then(|| grads[input.0].take().unwrap_or_else(|| vec![F::zero(); vi.len()]));
                let mut gw = self.wants(*weight).then(|| grads[weight.0].take().unwrap_or_else(|| vec![F::zero(); vw.len()]));
                geom.backward(vi, vw, g, gi.as_deref_mut(), gw.as_deref_mut());
                if let Some(gi) = gi {
                    grads[input.0] = Some(gi);
                }
                if let Some(gw) = gw {
                    grads[weight.0] = Some(gw);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = *out.last().unwrap();
                let gv = &self.nodes[gamma.0].value;
                let rows = g.len() / d;
                let gamma_of = |i: usize| gv[i % d];
                self.norm_backward(grads, *x, *gamma, *beta, g, xhat, rstd, rows, gamma_of, |i| i % d);
            }
            Op::GroupNorm { x, gamma, beta, groups, xhat, rstd } => {
                let c = out[1];
                let spatial: usize = out[2..].iter().product();
                let gv = &self.nodes[gamma.0].value;
                let rows = out[0] * groups;
                let ch = |i: usize| (i / spatial) % c;
                self.norm_backward(grads, *x, *gamma, *beta, g, xhat, rstd, rows, |i| gv[ch(i)], ch);
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(out, *axis);
                let y = &node.value;
                let slot = self.grad_slot(grads, *x);
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot = (0..len).fold(F::zero(), |acc, j| acc + g[at(j)] * y[at(j)]);
                        for j in 0..len {
                            slot[at(j)] = slot[at(j)] + y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
            Op::Sum { x, kept } => {
                let shape = self.nodes[x.0].shape.clone();
                let bs = broadcast_strides(kept, &shape);
                let slot = self.grad_slot(grads, *x);
                walk1(&shape, &bs, |o, r| slot[o] = slot[o] + g[r]);
            }
            Op::Permute { x, perm } => {
                let shape = &self.nodes[x.0].shape;
                let st = strides(shape);
                let ps: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
                let slot = self.grad_slot(grads, *x);
                walk1(out, &ps, |o, i| slot[i] = slot[i] + g[o]);
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(out, *axis);
                let mut offset = 0;
                let total = out[*axis] * inner;
                for &v in inputs {
                    let len = self.nodes[v.0].shape[*axis] * inner;
                    if self.wants(v) {
                        let slot = self.grad_slot(grads, v);
                        for o in 0..outer {
                            add_into(&mut slot[o * len..(o + 1) * len], &g[o * total + offset..o * total + offset + len]);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = self.nodes[x.0].shape.clone();
                let (outer, full, inner) = split_axis(&shape, *axis);
                let len = out[*axis];
                let slot = self.grad_slot(grads, *x);
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    add_into(&mut slot[dst..dst + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                }
            }
            Op::Expand(x) => self.accumulate_reduced(grads, *x, out, g, None),
            Op::Fused { input, grad } => {
                let slot = self.grad_slot(grads, *input);
                slot.iter_mut().zip(grad).for_each(|(d, &v)| *d = *d + v * g[0]);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn norm_backward(
        &self,
        grads: &mut [Option<Vec<F>>],
        x: Var,
        gamma: Var,
        beta: Var,
        g: &[F],
        xhat: &[F],
        rstd: &[F],
        rows: usize,
        gamma_of: impl Fn(usize) -> F,
        param_index: impl Fn(usize) -> usize,
    ) {
        let len = g.len() / rows;
        if self.wants(x) {
            let slot = self.grad_slot(grads, x);
            let inv = F::one() / F::lit(len as f64);
            for r in 0..rows {
                let base = r * len;
                let (mut m1, mut m2) = (F::zero(), F::zero());
                for i in base..base + len {
                    let dh = g[i] * gamma_of(i);
                    m1 = m1 + dh;
                    m2 = m2 + dh * xhat[i];
                }
                m1 = m1 * inv;
                m2 = m2 * inv;
                for i in base..base + len {
                    let dh = g[i] * gamma_of(i);
                    slot[i] = slot[i] + rstd[r] * (dh - m1 - xhat[i] * m2);
                }
            }
        }
        if self.wants(gamma) {
            let slot = self.grad_slot(grads, gamma);
            for i in 0..g.len() {
                let p = param_index(i);
                slot[p] = slot[p] + g[i] * xhat[i];
            }
        }
        if self.wants(beta) {
            let slot = self.grad_slot(grads, beta);
            for i in 0..g.len() {
                let p = param_index(i);
                slot[p] = slot[p] + g[i];
            }
        }
    }

    fn backward_matmul(&self, a: Var, b: Var, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let plan = MatmulPlan::new(&na.shape, &nb.shape).expect("validated in forward");
        let (m, k, n) = (plan.m, plan.k, plan.n);
        if self.wants(a) {
            let slot = self.grad_slot(grads, a);
            if plan.flat_b {
                gemm(plan.batch * m, n, k, g, false, &nb.value, true, slot, true);
            } else {
                plan.for_each_batch(|o, ia, ib| {
                    gemm(m, n, k, &g[o * m * n..], false, &nb.value[ib * k * n..], true, &mut slot[ia * m * k..(ia + 1) * m * k], true)
                });
            }
        }
        if self.wants(b) {
            let slot = self.grad_slot(grads, b);
            if plan.flat_b {
                gemm(k, plan.batch * m, n, &na.value, true, g, false, slot, true);
            } else {
                plan.for_each_batch(|o, ia, ib| {
                    gemm(k, m, n, &na.value[ia * m * k..], true, &g[o * m * n..], false, &mut slot[ib * k * n..(ib + 1) * k * n], true)
                });
            }
        }
    }
}

struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    batch_shape: Vec<usize>,
    batch_a: Vec<usize>,
    batch_b: Vec<usize>,
    batch: usize,
    /// `b` is a plain matrix shared by every batch entry of `a`.
    flat_b: bool,
}

impl MatmulPlan {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim(format!("matmul needs rank >= 2 operands, got {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::dim(format!("matmul inner extents differ: {sa:?} x {sb:?}")));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch_shape = broadcast_shapes(ba, bb)
            .map_err(|_| Error::dim(format!("matmul batch extents do not broadcast: {sa:?} x {sb:?}")))?;
        let mut out_shape = batch_shape.clone();
        out_shape.extend([m, n]);
        Ok(MatmulPlan {
            m,
            k,
            n,
            batch: batch_shape.iter().product(),
            batch_a: broadcast_strides(ba, &batch_shape),
            batch_b: broadcast_strides(bb, &batch_shape),
            flat_b: bb.iter().all(|&d| d == 1) && ba.len() >= bb.len(),
            out_shape,
            batch_shape,
        })
    }

    fn for_each_batch(&self, f: impl FnMut(usize, usize, usize)) {
        walk2(&self.batch_shape, &self.batch_a, &self.batch_b, f);
    }
}

fn normalize_rows<F: Element>(x: &[F], rows: usize, len: usize, eps: F) -> (Vec<F>, Vec<F>) {
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstd = vec![F::zero(); rows];
    let inv = F::one() / F::lit(len as f64);
    for r in 0..rows {
        let row = &x[r * len..(r + 1) * len];
        let mean = row.iter().fold(F::zero(), |a, &v| a + v) * inv;
        let var = row.iter().fold(F::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv;
        let s = F::one() / (var + eps).sqrt();
        rstd[r] = s;
        for (o, &v) in xhat[r * len..(r + 1) * len].iter_mut().zip(row) {
            *o = (v - mean) * s;
        }
    }
    (xhat, rstd)
}

/// Logistic function, evaluated without overflow for either sign.
pub fn sigmoid<F: Element>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

fn gelu<F: Element>(x: F) -> F {
    let (c, a, half) = (F::lit(GELU_C), F::lit(GELU_A), F::lit(0.5));
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<F: Element>(x: F) -> F {
    let (c, a, half) = (F::lit(GELU_C), F::lit(GELU_A), F::lit(0.5));
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::lit(3.0) * a * x * x)
}
