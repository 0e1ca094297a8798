//! Named parameter storage and per-forward binding onto a tape.

use std::collections::HashMap;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{checksum_f64, Tape, Tensor, Var};

/// Ordered map of parameter name to value. Iteration order is insertion
/// order, which fixes the layout of every serialized payload.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    map: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    pub fn checksum(&self) -> u64 {
        let mut acc = 0u64;
        for (name, t) in &self.map {
            acc = acc.rotate_left(7) ^ checksum_f64(t.data());
            acc ^= name.len() as u64;
        }
        acc
    }

    /// Records every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool, into: &mut Bound) {
        for (name, t) in &self.map {
            let v = tape.leaf(t.clone(), requires_grad);
            into.vars.insert(name.clone(), v);
        }
    }
}

/// Low-rank factors bound for one projection site.
#[derive(Clone, Copy, Debug)]
pub struct BoundLora {
    pub a: Var,
    pub b: Var,
    pub scale: f64,
}

/// Parameter-name to tape-variable map for a single forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
    lora: HashMap<String, BoundLora>,
}

impl Bound {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// Overrides (or adds) the variable used for `name`.
    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    pub fn insert_lora(&mut self, site: impl Into<String>, lora: BoundLora) {
        self.lora.insert(site.into(), lora);
    }

    pub fn lora(&self, site: &str) -> Option<BoundLora> {
        self.lora.get(site).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
