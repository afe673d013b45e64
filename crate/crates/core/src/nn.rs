//! Named parameter storage and the small layers both networks are built from.

use std::ops::Index;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autograd::{Conv2dParams, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct Param<F: Element> {
    pub name: String,
    pub tensor: Tensor<F>,
}

impl<F: Element> Param<F> {
    pub fn frozen(&self) -> bool {
        !self.tensor.requires_grad()
    }
}

/// Every trainable tensor of a model, addressed by [`ParamId`] or by dotted name.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F: Element> {
    params: Vec<Param<F>>,
}

/// Tape handles for each parameter of a store, in store order.
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl<F: Element> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> ParamId {
        self.params.push(Param { name: name.into(), tensor: tensor.with_requires_grad(true) });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].tensor
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Records every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape<F>) -> Bound {
        Bound(self.params.iter().map(|p| tape.leaf(&p.tensor)).collect())
    }

    /// Accumulates leaf gradients into the parameters' grad buffers.
    pub fn absorb(&mut self, grads: &Gradients<F>, bound: &Bound) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&bound.0) {
            grads.write_into(v, &mut p.tensor)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub fn set_trainable(&mut self, id: ParamId, on: bool) {
        self.params[id.0].tensor.set_requires_grad(on);
    }

    /// Copies values (not flags) from a store with identical names and shapes.
    pub fn load_values(&mut self, other: &ParamStore<F>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::config(format!(
                "parameter count mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.tensor.shape() != src.tensor.shape() {
                return Err(Error::config(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    dst.name,
                    dst.tensor.shape(),
                    src.name,
                    src.tensor.shape()
                )));
            }
            dst.tensor.data_mut().copy_from_slice(src.tensor.data());
        }
        Ok(())
    }

    pub fn cast<G: Element>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), tensor: p.tensor.cast() })
                .collect(),
        }
    }
}

/// Kaiming-uniform (fan-in, ReLU gain): `U(-√(6/fan_in), √(6/fan_in))`.
pub fn kaiming_uniform<F: Element>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<F> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_fn(shape, |_| F::lit(dist.sample(rng)))
}

pub fn xavier_uniform<F: Element>(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<F> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_fn(&[fan_in, fan_out], |_| F::lit(dist.sample(rng)))
}

pub fn normal<F: Element>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<F> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| F::lit(dist.sample(rng)))
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub params: Conv2dParams,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Element>(
        store: &mut ParamStore<F>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        params: Conv2dParams,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let g = params.groups;
        if g == 0 || !c_in.is_multiple_of(g) || !c_out.is_multiple_of(g) {
            return Err(Error::config(format!(
                "{name}: {g} groups must divide {c_in} in- and {c_out} out-channels"
            )));
        }
        let shape = [c_out, c_in / g, kernel, kernel];
        let weight = store.add(format!("{name}.weight"), kaiming_uniform(&shape, c_in / g * kernel * kernel, rng));
        Ok(Conv2d { weight, params })
    }

    pub fn forward<F: Element>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p[self.weight], self.params)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.weight]
    }
}

pub const NORM_EPS: f64 = 1e-5;

/// Group count used by the backbone's batch-independent normalization.
pub fn norm_groups(channels: usize) -> usize {
    (1..=channels.min(8)).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<F: Element>(store: &mut ParamStore<F>, name: &str, channels: usize) -> Self {
        GroupNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            groups: norm_groups(channels),
        }
    }

    pub fn forward<F: Element>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        tape.group_norm(x, p[self.gamma], p[self.beta], self.groups, NORM_EPS)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Element>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<F: Element>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p[self.gamma], p[self.beta], NORM_EPS)
    }
}

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<F: Element>(store: &mut ParamStore<F>, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: store.add(format!("{name}.weight"), xavier_uniform(d_in, d_out, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d_out])),
        }
    }

    /// Fan-in Kaiming init, for layers followed by ReLU.
    pub fn new_relu<F: Element>(store: &mut ParamStore<F>, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: store.add(format!("{name}.weight"), kaiming_uniform(&[d_in, d_out], d_in, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d_out])),
        }
    }

    pub fn forward<F: Element>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p[self.weight], Some(p[self.bias]))
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}
