//! Named parameter storage shared by both towers of a dual encoder.
//!
//! Names are namespaced `q/…`, `a/…`, or `shared/…`. A shared component is
//! stored exactly once under `shared/`; frozen parameters carry
//! `trainable = false` and never receive optimizer updates.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Map from storage name to parameter tensor. Iteration order is the sorted
/// name order, which keeps serialization and fingerprints deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: String, value: Tensor, trainable: bool) {
        self.entries.insert(name, Param { value, trainable });
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries.get(name).ok_or_else(|| Error::InvariantViolation {
            tensor: name.to_string(),
            message: "parameter missing from store".to_string(),
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::InvariantViolation {
                tensor: name.to_string(),
                message: "parameter missing from store".to_string(),
            })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Number of distinct trainable tensors in the store.
    pub fn trainable_count(&self) -> usize {
        self.entries.values().filter(|p| p.trainable).count()
    }

    /// Total number of stored elements across all tensors.
    pub fn total_elements(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }
}
