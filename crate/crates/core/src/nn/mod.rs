//! Minimal layer library with explicit forward/backward passes.
//!
//! Every layer keeps its tensors in a shared [`ParamStore`] and refers to them
//! by [`ParamId`]. Forward passes return whatever the matching backward pass
//! needs; backward passes accumulate parameter gradients into the store and
//! return the gradient with respect to the layer input. Activations use NCHW
//! layout in double precision.

mod act;
mod conv;
mod norm;
mod pool;

pub use act::{
    leaky_relu, leaky_relu_backward, relu, relu_backward, sigmoid, sigmoid_backward, sigmoid_scalar,
};
pub use conv::Conv2d;
pub use norm::{BatchNorm2d, BnCache, BN_EPS, BN_MOMENTUM};
pub use pool::{
    avg_pool2, avg_pool2_backward, concat_channels, global_avg_pool, global_avg_pool_backward,
    global_max_pool, global_max_pool_backward, split_channels, upsample_nearest2,
    upsample_nearest2_backward, MaxPool2d,
};

use std::collections::HashMap;

use ndarray::{Array4, ArrayD, IxDyn};
use rand::Rng;

pub type Tensor4 = Array4<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in registration order.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable, updated by the optimizer.
    Weight,
    /// Running statistics; persisted but never touched by the optimizer.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Names must be unique within a store.
    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: ArrayD<f64>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.entries.len();
        let grad = ArrayD::zeros(value.raw_dim());
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            kind,
            value,
            grad,
        });
        ParamId(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &ArrayD<f64> {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.entries[id.0].grad
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    pub fn num_weights(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Weight)
            .map(|e| e.value.len())
            .sum()
    }
}

/// Forward-pass context. Training passes may update running statistics and
/// use batch statistics; evaluation passes only read the store, so a frozen
/// store can serve many concurrent evaluation passes.
pub enum Pass<'a> {
    Train(&'a mut ParamStore),
    Eval(&'a ParamStore),
}

impl<'a> Pass<'a> {
    pub fn store(&self) -> &ParamStore {
        match self {
            Pass::Train(ps) => ps,
            Pass::Eval(ps) => ps,
        }
    }

    pub fn is_train(&self) -> bool {
        matches!(self, Pass::Train(_))
    }
}

/// He-style fan-in scaled uniform init: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
pub fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> ArrayD<f64> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-bound..bound))
}

#[cfg(test)]
pub(crate) mod gradcheck {
    //! Central finite differences used by the layer unit tests.

    /// Returns max relative error between `analytic` and central differences
    /// of `loss` along every coordinate of `x`.
    pub fn max_rel_error(
        x: &mut [f64],
        analytic: &[f64],
        step: f64,
        mut loss: impl FnMut(&[f64]) -> f64,
    ) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..x.len() {
            let orig = x[i];
            x[i] = orig + step;
            let lp = loss(x);
            x[i] = orig - step;
            let lm = loss(x);
            x[i] = orig;
            let numeric = (lp - lm) / (2.0 * step);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic[i] - numeric).abs() / denom);
        }
        worst
    }
}
