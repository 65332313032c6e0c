//! Persistent parameter storage.
//!
//! Tapes are rebuilt every step, so learnable values live outside them in a
//! [`ParamSet`]: an ordered, name-addressed collection of dense tensors. The
//! insertion order is the canonical order used by the optimizer state and the
//! checkpoint format, which keeps training runs reproducible.

use super::real::Real;
use super::tape::{Tape, Tensor};
use crate::error::{Error, Result};
use rand::Rng;
use std::collections::HashMap;

/// A plain dense tensor value (no tape attached).
#[derive(Debug, Clone, PartialEq)]
pub struct PTensor<T> {
    pub data: Vec<T>,
    pub shape: Vec<usize>,
}

impl<T: Real> PTensor<T> {
    pub fn new(data: Vec<T>, shape: &[usize]) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        PTensor { data, shape: shape.to_vec() }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        PTensor { data: vec![T::zero(); shape.iter().product()], shape: shape.to_vec() }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        PTensor { data: vec![v; shape.iter().product()], shape: shape.to_vec() }
    }

    /// Uniform init in +-sqrt(1/fan_in).
    pub fn uniform_fan_in(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Self {
        let bound = (1.0 / fan_in as f64).sqrt();
        let data = (0..shape.iter().product())
            .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        PTensor { data, shape: shape.to_vec() }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Ordered, named parameter collection.
#[derive(Debug, Clone)]
pub struct ParamSet<T> {
    entries: Vec<(String, PTensor<T>)>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new(), by_name: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: PTensor<T>) -> usize {
        let name = name.into();
        debug_assert!(!self.by_name.contains_key(&name), "duplicate param {name}");
        let idx = self.entries.len();
        self.by_name.insert(name.clone(), idx);
        self.entries.push((name, t));
        idx
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&PTensor<T>> {
        self.index_of(name)
            .map(|i| &self.entries[i].1)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter tensor: {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut PTensor<T>> {
        let i = self
            .index_of(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter tensor: {name}")))?;
        Ok(&mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &PTensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut PTensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn by_index(&self, i: usize) -> (&str, &PTensor<T>) {
        let (n, t) = &self.entries[i];
        (n.as_str(), t)
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut PTensor<T> {
        &mut self.entries[i].1
    }

    /// Register every entry as a gradient leaf on `tape`, in canonical order.
    pub fn register_leaves(&self, tape: &mut Tape<T>) -> Result<Vec<Tensor>> {
        self.entries
            .iter()
            .map(|(_, t)| tape.leaf(t.data.clone(), &t.shape))
            .collect()
    }

    /// Register every entry as a constant (frozen forward, nothing recorded).
    pub fn register_constants(&self, tape: &mut Tape<T>) -> Result<Vec<Tensor>> {
        self.entries
            .iter()
            .map(|(_, t)| tape.constant(t.data.clone(), &t.shape))
            .collect()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.data.iter().all(|v| v.is_finite()))
    }
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Tensor handles produced by registering a ParamSet on a tape, still
/// addressable by name.
pub struct RegisteredParams<'a, T> {
    set: &'a ParamSet<T>,
    pub tensors: Vec<Tensor>,
}

impl<'a, T: Real> RegisteredParams<'a, T> {
    /// Pair an already-registered tensor list with its set (tensors must be
    /// in the set's canonical order).
    pub fn from_parts(set: &'a ParamSet<T>, tensors: Vec<Tensor>) -> Self {
        debug_assert_eq!(set.len(), tensors.len());
        RegisteredParams { set, tensors }
    }

    pub fn leaves(set: &'a ParamSet<T>, tape: &mut Tape<T>) -> Result<Self> {
        Ok(RegisteredParams { set, tensors: set.register_leaves(tape)? })
    }

    pub fn constants(set: &'a ParamSet<T>, tape: &mut Tape<T>) -> Result<Self> {
        Ok(RegisteredParams { set, tensors: set.register_constants(tape)? })
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        self.set
            .index_of(name)
            .map(|i| self.tensors[i])
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter tensor: {name}")))
    }
}
