//! Named parameter storage and binding onto a tape.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

/// Suffix of non-trainable running-statistics buffers (`[2, C]`: mean row,
/// variance row).
pub const RUNNING_SUFFIX: &str = ".running";

pub fn is_buffer(name: &str) -> bool {
    name.ends_with(RUNNING_SUFFIX)
}

/// A set of named tensors plus, while a step is in flight, the tape handle
/// each one is bound to.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelParams<T> {
    tensors: BTreeMap<String, Tensor<T>>,
    bound: BTreeMap<String, Var>,
    /// Seed the parameters were initialized from.
    pub seed: u64,
}

impl<T: Real> ModelParams<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            tensors: BTreeMap::new(),
            bound: BTreeMap::new(),
            seed,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Number of trainable scalars (running buffers excluded).
    pub fn trainable_count(&self) -> usize {
        self.iter()
            .filter(|(n, _)| !is_buffer(n))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Absorbs every tensor from `other`; names must not collide.
    pub fn merge(&mut self, other: ModelParams<T>) -> Result<()> {
        for (name, t) in other.tensors {
            if self.tensors.contains_key(&name) {
                return Err(Error::invalid(alloc::format!("duplicate parameter `{name}`")));
            }
            self.tensors.insert(name, t);
        }
        Ok(())
    }

    /// Puts every trainable tensor on `tape` as a leaf.
    pub fn bind(&mut self, tape: &mut Tape<T>, requires_grad: bool) {
        self.bound.clear();
        for (name, t) in &self.tensors {
            if !is_buffer(name) {
                let v = tape.leaf(t.clone(), requires_grad);
                self.bound.insert(name.clone(), v);
            }
        }
    }

    /// Overrides the handle of one parameter (used by gradient audits).
    pub fn rebind(&mut self, name: &str, var: Var) {
        self.bound.insert(name.to_string(), var);
    }

    pub fn unbind(&mut self) {
        self.bound.clear();
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.bound
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Gradients of bound parameters, keyed by name.
    pub fn grads<'t>(&self, tape: &'t Tape<T>) -> Vec<(String, Option<&'t Tensor<T>>)> {
        self.bound
            .iter()
            .map(|(n, &v)| (n.clone(), tape.grad(v)))
            .collect()
    }
}

pub(crate) fn he_normal<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let std = libm::sqrt(2.0 / fan_in as f64);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            T::of(z * std)
        })
        .collect();
    Tensor::new(shape, data).expect("shape from caller")
}

pub(crate) fn init_bn<T: Real>(params: &mut ModelParams<T>, prefix: &str, c: usize) {
    params.insert(alloc::format!("{prefix}.bn.scale"), Tensor::ones(&[c]));
    params.insert(alloc::format!("{prefix}.bn.shift"), Tensor::zeros(&[c]));
    let mut running = Tensor::zeros(&[2, c]);
    running.data_mut()[c..].iter_mut().for_each(|v| *v = T::one());
    params.insert(alloc::format!("{prefix}.bn{RUNNING_SUFFIX}"), running);
}

/// Applies the batch norm stored under `{prefix}.bn.*`.
pub(crate) fn apply_bn<T: Real>(
    tape: &mut Tape<T>,
    params: &mut ModelParams<T>,
    prefix: &str,
    x: Var,
    mode: Mode,
) -> Result<Var> {
    let scale = params.var(&alloc::format!("{prefix}.bn.scale"))?;
    let shift = params.var(&alloc::format!("{prefix}.bn.shift"))?;
    let running = params.get_mut(&alloc::format!("{prefix}.bn{RUNNING_SUFFIX}"))?;
    let c = running.shape()[1];
    let (mean, var) = running.data_mut().split_at_mut(c);
    tape.batch_norm(x, scale, shift, mean, var, mode)
}
