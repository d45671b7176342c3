//! Named parameter storage and its binding onto a tape.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named parameter tensors. Order is registration order and is the
/// order used by optimizers, checkpoints and gradient reports.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        debug_assert!(self.find(name).is_none(), "duplicate parameter {name}");
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Adds a tensor initialized uniformly in `[-bound, bound]`.
    pub fn add_uniform(
        &mut self,
        name: &str,
        dims: &[usize],
        bound: f64,
        rng: &mut SplitMix64,
    ) -> Result<ParamId> {
        let mut t = Tensor::zeros(dims)?;
        for v in t.data_mut() {
            *v = rng.uniform(-bound, bound);
        }
        Ok(self.add(name, t))
    }

    pub fn add_full(&mut self, name: &str, dims: &[usize], value: f64) -> Result<ParamId> {
        Ok(self.add(name, Tensor::full(dims, value)?))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::ShapeMismatch {
                op: "ParamSet::set",
                left: self.values[id.0].shape(),
                right: value.shape(),
            });
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Pushes every parameter onto `tape`; those for which `trainable`
    /// returns true become gradient-requiring leaves.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Binding {
        let vars = self
            .names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| tape.leaf(v.clone(), trainable(n)))
            .collect();
        Binding { vars }
    }

    /// Name of the first parameter holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.iter().find(|(_, _, t)| !t.is_finite()).map(|(_, n, _)| n)
    }
}

/// Tape handles of a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients of all parameters after `tape.backward`, zero where absent.
    pub fn gradients(&self, tape: &Tape, params: &ParamSet) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(params.values.iter())
            .map(|(&v, p)| tape.grad(v).unwrap_or_else(|| p.zeros_like()))
            .collect()
    }
}
