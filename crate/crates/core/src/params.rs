//! Named parameter storage shared by the network, the kernel estimator and
//! the optimizer.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Persistent state that is not trained (batch-norm running statistics).
    Buffer,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    kinds: Vec<ParamKind>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name:?}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        self.kinds.push(kind);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(move |i| &mut self.values[i])
    }

    /// Looks up a parameter that the caller's architecture guarantees exists.
    pub fn expect(&self, name: &str) -> &Tensor {
        self.get(name)
            .unwrap_or_else(|| panic!("missing parameter {name:?}"))
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn kind(&self, i: usize) -> ParamKind {
        self.kinds[i]
    }

    pub fn value(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.values[i]
    }

    /// `(name, kind, value)` in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, ParamKind, &Tensor)> {
        self.names
            .iter()
            .zip(&self.kinds)
            .zip(&self.values)
            .map(|((n, k), v)| (n.as_str(), *k, v))
    }

    pub fn count_trainable(&self) -> usize {
        self.iter()
            .filter(|(_, k, _)| *k == ParamKind::Trainable)
            .map(|(_, _, v)| v.len())
            .sum()
    }

    /// Places every entry on `tape`; trainable ones become tracked leaves.
    pub fn bind(&self, tape: &Tape) -> Bound<'_> {
        let vars = self
            .values
            .iter()
            .zip(&self.kinds)
            .map(|(v, k)| match k {
                ParamKind::Trainable => tape.leaf(v.clone()),
                ParamKind::Buffer => tape.constant(v.clone()),
            })
            .collect();
        Bound { store: self, vars }
    }

    /// Places every entry on `tape` as an untracked constant.
    pub fn bind_frozen(&self, tape: &Tape) -> Bound<'_> {
        let vars = self.values.iter().map(|v| tape.constant(v.clone())).collect();
        Bound { store: self, vars }
    }

    /// Registers a fan-in-scaled uniform weight `U(−1/√fan_in, 1/√fan_in)`
    /// and, optionally, a bias drawn from the same range.
    pub fn init_conv(
        &mut self,
        rng: &mut impl Rng,
        prefix: &str,
        shape: [usize; 4],
        bias: bool,
    ) -> Result<()> {
        let fan_in = shape[1] * shape[2] * shape[3];
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let w = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(format!("{prefix}.weight"), Tensor::from_vec(&shape, w)?, ParamKind::Trainable)?;
        if bias {
            let b = (0..shape[0]).map(|_| rng.random_range(-bound..bound)).collect();
            self.insert(format!("{prefix}.bias"), Tensor::from_vec(&[shape[0]], b)?, ParamKind::Trainable)?;
        }
        Ok(())
    }

    /// Registers batch-norm affine parameters and running statistics.
    pub fn init_batch_norm(&mut self, prefix: &str, channels: usize) -> Result<()> {
        self.insert(format!("{prefix}.weight"), Tensor::full(&[channels], 1.0), ParamKind::Trainable)?;
        self.insert(format!("{prefix}.bias"), Tensor::zeros(&[channels]), ParamKind::Trainable)?;
        self.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[channels]), ParamKind::Buffer)?;
        self.insert(format!("{prefix}.running_var"), Tensor::full(&[channels], 1.0), ParamKind::Buffer)?;
        Ok(())
    }

    /// Bit-level equality of every entry.
    pub fn bit_equal(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self.kinds == other.kinds
            && self.values.iter().zip(&other.values).all(|(a, b)| {
                a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// A [`ParamStore`] placed on a tape.
pub struct Bound<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl<'a> Bound<'a> {
    pub fn var(&self, name: &str) -> &Var {
        let i = self
            .store
            .position(name)
            .unwrap_or_else(|| panic!("missing parameter {name:?}"));
        &self.vars[i]
    }

    pub fn try_var(&self, name: &str) -> Option<&Var> {
        self.store.position(name).map(|i| &self.vars[i])
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// Gradients aligned with the store's entries; `None` for buffers and
    /// parameters the loss does not depend on.
    pub fn gradients(&self, grads: &mut Grads) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|v| grads.take(v)).collect()
    }
}
