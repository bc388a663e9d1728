//! Named parameter collections with deterministic iteration order.

use crate::error::{Result, TidmError};
use crate::numerics::Tensor;
use std::collections::BTreeMap;

/// Map from `/`-separated path to tensor. BTreeMap gives lexicographic
/// iteration, which fixes gradient-reduction and checkpoint order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
    step_count: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(TidmError::invalid(format!("duplicate parameter {name:?}")));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    /// Replace an existing entry (optimizer update path).
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.entries.get_mut(name) {
            Some(slot) => {
                *slot = value;
                Ok(())
            }
            None => Err(TidmError::invalid(format!("unknown parameter {name:?}"))),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| TidmError::invalid(format!("unknown parameter {name:?}")))
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

    /// Lexicographic (name, tensor) iteration.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn set_step_count(&mut self, step: u64) {
        self.step_count = step;
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    /// Entries whose name starts with `prefix` (used for checkpoint
    /// subtrees like `codec/` and `unet/anchor/`).
    pub fn subtree(&self, prefix: &str) -> ParamStore {
        let entries = self
            .entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        ParamStore {
            entries,
            step_count: self.step_count,
        }
    }

    /// Merge another store's entries; duplicate names are an error.
    pub fn merge(&mut self, other: &ParamStore) -> Result<()> {
        for (name, tensor) in other.iter() {
            self.insert(name, tensor.clone())?;
        }
        Ok(())
    }

    /// Order-insensitive checksum over names, shapes, and payload bytes.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (name, tensor) in self.iter() {
            for b in name.as_bytes() {
                h ^= *b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            h ^= tensor.checksum();
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iteration_is_lexicographic() {
        let mut p = ParamStore::new();
        p.insert("b/w", Tensor::scalar(1.0)).unwrap();
        p.insert("a/w", Tensor::scalar(2.0)).unwrap();
        p.insert("a/b", Tensor::scalar(3.0)).unwrap();
        let names: Vec<_> = p.names().collect();
        assert_eq!(names, vec!["a/b", "a/w", "b/w"]);
    }

    #[test]
    fn duplicate_insert_rejected() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::scalar(0.0)).unwrap();
        assert!(p.insert("x", Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn subtree_filters_by_prefix() {
        let mut p = ParamStore::new();
        p.insert("codec/enc/w", Tensor::scalar(1.0)).unwrap();
        p.insert("unet/main/w", Tensor::scalar(2.0)).unwrap();
        let sub = p.subtree("codec/");
        assert_eq!(sub.len(), 1);
        assert!(sub.contains("codec/enc/w"));
    }
}
