//! Named parameter storage and gradient maps.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{NumError, Result};
use crate::tensor::Tensor;

/// Named parameter tensors. Iteration order is sorted by name, which keeps
/// optimizer updates and serialization deterministic.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    /// Inserts a tensor that the optimizer must never touch.
    pub fn insert_frozen(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        self.frozen.insert(name.clone());
        self.tensors.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| NumError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors.get_mut(name).ok_or_else(|| NumError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.frozen.remove(name);
        self.tensors.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    /// Marks every parameter whose name starts with `prefix` as frozen.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        let names: Vec<String> =
            self.tensors.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
        self.frozen.extend(names);
    }

    pub fn unfreeze_prefix(&mut self, prefix: &str) {
        self.frozen.retain(|k| !k.starts_with(prefix));
    }

    pub fn frozen_names(&self) -> impl Iterator<Item = &str> {
        self.frozen.iter().map(String::as_str)
    }

    /// Sub-store containing only parameters whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let tensors: BTreeMap<String, Tensor> = self
            .tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let frozen = self.frozen.iter().filter(|k| tensors.contains_key(*k)).cloned().collect();
        ParamStore { tensors, frozen }
    }

    /// Copies every entry of `other` into this store, replacing existing ones.
    pub fn merge(&mut self, other: &ParamStore) {
        for (k, v) in &other.tensors {
            self.tensors.insert(k.clone(), v.clone());
        }
        self.frozen.extend(other.frozen.iter().cloned());
    }

    /// Bitwise equality of all tensors under `prefix`.
    pub fn bit_eq_prefix(&self, other: &ParamStore, prefix: &str) -> bool {
        let a: Vec<_> = self.iter().filter(|(k, _)| k.starts_with(prefix)).collect();
        let b: Vec<_> = other.iter().filter(|(k, _)| k.starts_with(prefix)).collect();
        a.len() == b.len() && a.iter().zip(&b).all(|((ka, ta), (kb, tb))| ka == kb && ta.bit_eq(tb))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub(crate) fn from_map(map: BTreeMap<String, Tensor>) -> Self {
        Self { map }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// True when every gradient under `prefix` is exactly `+0.0`.
    pub fn all_zero_prefix(&self, prefix: &str) -> bool {
        self.map
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .all(|(_, t)| t.data().iter().all(|v| v.to_bits() == 0))
    }

    /// Adds another gradient map into this one (used for accumulation).
    pub fn accumulate(&mut self, other: &Gradients) {
        for (k, v) in &other.map {
            match self.map.get_mut(k) {
                Some(t) => t.add_assign(v),
                None => {
                    self.map.insert(k.clone(), v.clone());
                }
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.map.values().flat_map(|t| t.data().iter()).map(|v| v * v).sum::<f64>().sqrt()
    }
}
