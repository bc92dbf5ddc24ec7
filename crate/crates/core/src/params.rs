//! Named parameter storage.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Shape, Tensor};

/// Standard deviation of the Gaussian weight initializer.
pub const INIT_STD: f64 = 0.02;

/// Learnable tensors keyed by hierarchical dotted name, iterated in name order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    values: BTreeMap<String, Tensor<T>>,
    grads: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            values: BTreeMap::new(),
            grads: BTreeMap::new(),
        }
    }

    /// Registers a tensor. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.values.contains_key(&name) {
            return Err(Error::invalid("parameter name", alloc::format!("`{name}` registered twice")));
        }
        self.values.insert(name, value);
        Ok(())
    }

    /// Gaussian weight, mean 0 and std [`INIT_STD`].
    pub fn init_weight<R: Rng + ?Sized>(&mut self, name: impl Into<String>, shape: Shape, rng: &mut R) -> Result<()> {
        self.insert(name, Tensor::randn(shape, 0.0, INIT_STD, rng))
    }

    /// Zero bias of shape `(1, channels, 1, 1)`.
    pub fn init_bias(&mut self, name: impl Into<String>, channels: usize) -> Result<()> {
        self.insert(name, Tensor::zeros(Shape::new(1, channels, 1, 1)))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.values
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.values
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// Replaces a value, keeping the registered shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(
                "parameter",
                alloc::format!("`{name}` is {} but value is {}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.values.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.values().map(Tensor::len).sum()
    }

    /// Scalars in parameters whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            values: self.values.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            grads: BTreeMap::new(),
        }
    }

    /// Moves every parameter onto `tape`. Differentiable when `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.variable(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    /// Copies the gradients of a bound store out of `tape`.
    pub fn collect_grads(&mut self, tape: &Tape<T>, bound: &Bound) -> Result<()> {
        for name in self.values.keys() {
            let var = bound.get(name)?;
            let g = tape
                .grad(var)
                .ok_or_else(|| Error::MissingGradient(name.clone()))?;
            self.grads.insert(name.clone(), g.clone());
        }
        Ok(())
    }

    pub fn set_grad(&mut self, name: &str, grad: Tensor<T>) -> Result<()> {
        let shape = self.get(name)?.shape();
        if grad.shape() != shape {
            return Err(Error::shape(
                "gradient",
                alloc::format!("`{name}` is {shape} but gradient is {}", grad.shape()),
            ));
        }
        self.grads.insert(name.to_string(), grad);
        Ok(())
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn clear_grads(&mut self) {
        self.grads.clear();
    }

    pub(crate) fn values_and_grads(
        &mut self,
    ) -> (&mut BTreeMap<String, Tensor<T>>, &BTreeMap<String, Tensor<T>>) {
        (&mut self.values, &self.grads)
    }

    /// Merges `other` into `self`; names must not collide.
    pub fn extend(&mut self, other: ParamStore<T>) -> Result<()> {
        for (k, v) in other.values {
            self.insert(k, v)?;
        }
        Ok(())
    }

    /// Parameters whose name starts with `prefix`, as a new store.
    pub fn subset(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            values: self
                .values
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            grads: BTreeMap::new(),
        }
    }

    pub fn shapes(&self) -> Vec<(String, Shape)> {
        self.iter().map(|(k, v)| (k.to_string(), v.shape())).collect()
    }
}

/// Tape handles of a bound [`ParamStore`], looked up by name.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// `Some` when `name` was bound.
    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn merge(&mut self, other: Bound) {
        self.vars.extend(other.vars);
    }
}
