//! Layers with explicit forward and backward passes.
//!
//! Layers are stateless descriptions that refer to their weights by
//! [`ParamId`]; the weights live in a [`ParamSet`]. Online and target networks
//! are two `ParamSet`s laid out identically, which makes the momentum update
//! and checkpointing plain loops over named tensors.

mod block;
mod conv;
mod linear;
mod norm;
mod pool;

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub use self::block::{BlockCache, ResidualBlock};
pub use self::conv::Conv2d;
pub use self::linear::Linear;
pub use self::norm::{BatchNorm2d, BnCache};
pub use self::pool::{global_avg_pool, global_avg_pool_backward, relu_backward, relu_in_place, MaxPool2d, MaxPoolCache};
use crate::error::shape_err;
use crate::{Real, Result, Tensor};

/// Index of a tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn push(&mut self, name: String, t: Tensor<F>) -> ParamId {
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Same names, zero-filled tensors.
    pub fn zeros_like(&self) -> Self {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.fill(F::zero());
        }
    }

    /// Same names in the same order with the same shapes.
    pub fn is_isomorphic(&self, other: &Self) -> bool {
        self.names == other.names
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape())
    }

    pub fn check_isomorphic(&self, other: &Self) -> Result<()> {
        if self.is_isomorphic(other) {
            Ok(())
        } else {
            Err(shape_err!("parameter sets differ in layout"))
        }
    }

    /// Overwrites the tensor called `name`; the shape must match.
    pub fn assign(&mut self, name: &str, t: Tensor<F>) -> Result<()> {
        let id = self.find(name).ok_or_else(|| shape_err!("no parameter named `{name}`"))?;
        if self.tensors[id.0].shape() != t.shape() {
            return Err(shape_err!("`{name}`: expected {:?}, got {:?}", self.tensors[id.0].shape(), t.shape()));
        }
        self.tensors[id.0] = t;
        Ok(())
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamSet<G> {
        ParamSet { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }
}

/// Collects trainable parameters and running-statistics buffers while a
/// network is being built.
pub struct Registry<'r, F, R: ?Sized> {
    pub params: ParamSet<F>,
    pub stats: ParamSet<F>,
    pub rng: &'r mut R,
}

impl<'r, F: Real, R: Rng + ?Sized> Registry<'r, F, R> {
    pub fn new(rng: &'r mut R) -> Self {
        Registry { params: ParamSet::new(), stats: ParamSet::new(), rng }
    }

    pub fn normal(&mut self, name: String, shape: &[usize], std: f64) -> ParamId {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            F::lit(z * std)
        });
        self.params.push(name, t)
    }

    pub fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> ParamId {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| F::lit(rng.random_range(-bound..=bound)));
        self.params.push(name, t)
    }

    pub fn constant(&mut self, name: String, shape: &[usize], v: f64) -> ParamId {
        self.params.push(name, Tensor::full(shape, F::lit(v)))
    }

    pub fn stat(&mut self, name: String, shape: &[usize], v: f64) -> ParamId {
        self.stats.push(name, Tensor::full(shape, F::lit(v)))
    }
}

/// How a forward pass treats batch norm and whether it records what the
/// backward pass needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    /// Batch statistics, running statistics updated, caches recorded.
    Train,
    /// Batch statistics and running-statistics update, no caches. Used for
    /// the momentum (key) branch.
    TrainNoGrad,
    /// Batch statistics, caches recorded, running statistics untouched.
    /// Used by gradient checks so repeated evaluations see the same function.
    Probe,
    /// Running statistics, no caches.
    Eval,
}

impl Pass {
    pub fn batch_stats(self) -> bool {
        !matches!(self, Pass::Eval)
    }

    pub fn record(self) -> bool {
        matches!(self, Pass::Train | Pass::Probe)
    }

    pub fn update_stats(self) -> bool {
        matches!(self, Pass::Train | Pass::TrainNoGrad)
    }
}

#[cfg(test)]
mod tests;
