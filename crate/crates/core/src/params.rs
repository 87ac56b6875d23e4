//! Named parameter storage shared by every network in a training run.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered collection of named parameter tensors. Names are namespaced by
/// network (`g.`, `h.`, `f.`, `d.`) so optimizers can select groups by prefix.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid("params", format!("duplicate name {name}")));
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.ids().filter(move |&id| self.names[id.0].starts_with(prefix))
    }

    /// Total scalar count of the parameters whose name starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.ids_with_prefix(prefix)
            .map(|id| self.values[id.0].numel())
            .sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }
}

/// Fan-in scaled uniform init: bound = gain * sqrt(3 / fan_in).
pub fn kaiming_uniform<T: Scalar>(
    shape: &[usize],
    fan_in: usize,
    gain: f64,
    rng: &mut impl Rng,
) -> Tensor<T> {
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::c(rng.gen_range(-bound..bound)))
}

/// Gain recommended for leaky-relu with the given negative slope.
pub fn leaky_relu_gain(slope: f64) -> f64 {
    (2.0 / (1.0 + slope * slope)).sqrt()
}

/// Uniform bias init with bound 1/sqrt(fan_in).
pub fn bias_uniform<T: Scalar>(len: usize, fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(&[len], |_| T::c(rng.gen_range(-bound..bound)))
}
