use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Entries whose name starts with any of `prefixes`.
    pub fn subset(&self, prefixes: &[&str]) -> ParameterSet {
        let entries = self
            .entries
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        ParameterSet { entries }
    }

    /// Adds every entry of `other`; names must not collide.
    pub fn extend(&mut self, other: ParameterSet) -> Result<()> {
        for (k, v) in other.entries {
            if self.entries.contains_key(&k) {
                return Err(Error::contract("parameter_set", format!("duplicate name `{k}`")));
            }
            self.entries.insert(k, v);
        }
        Ok(())
    }

    /// Overwrites values from `source`, requiring identical names and shapes.
    pub fn copy_from(&mut self, source: &ParameterSet) -> Result<()> {
        if self.entries.len() != source.entries.len() {
            return Err(Error::contract(
                "copy_from",
                format!("{} vs {} parameters", self.entries.len(), source.entries.len()),
            ));
        }
        for (name, dst) in self.entries.iter_mut() {
            let src = source
                .entries
                .get(name)
                .ok_or_else(|| Error::contract("copy_from", format!("missing `{name}`")))?;
            if src.shape() != dst.shape() {
                return Err(Error::contract(
                    "copy_from",
                    format!("`{name}` shape {:?} vs {:?}", src.shape(), dst.shape()),
                ));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// Bitwise equality of every value.
    pub fn bit_equal(&self, other: &ParameterSet) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Gradients keyed like the [`ParameterSet`] they belong to.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    entries: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn from_map(entries: BTreeMap<String, Tensor>) -> Self {
        Self { entries }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn global_norm(&self) -> f64 {
        self.entries.values().map(Tensor::squared_norm).sum::<f64>().sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm {
            let s = max_norm / (norm + 1e-6);
            for t in self.entries.values_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
        norm
    }
}
