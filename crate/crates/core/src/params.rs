//! Named parameter registry shared by the base model and adapter bundles.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which part of the model a parameter belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Partition {
    Base,
    Bundle(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub tensor: Tensor,
    pub frozen: bool,
    pub partition: Partition,
}

/// Insertion-ordered map from parameter name to tensor, frozen flag and partition.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    entries: IndexMap<String, ParamEntry>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, partition: Partition) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::AlreadyExists(name.to_string()));
        }
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                tensor,
                frozen: false,
                partition,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
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

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names_in<'a>(&'a self, partition: &'a Partition) -> impl Iterator<Item = &'a str> + 'a {
        self.entries
            .iter()
            .filter(move |(_, e)| &e.partition == partition)
            .map(|(k, _)| k.as_str())
    }

    /// Number of scalar parameters in a partition.
    pub fn count(&self, partition: &Partition) -> usize {
        self.entries
            .values()
            .filter(|e| &e.partition == partition)
            .map(|e| e.tensor.len())
            .sum()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| !e.frozen)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn set_frozen_all(&mut self, frozen: bool) {
        self.entries.values_mut().for_each(|e| e.frozen = frozen);
    }

    /// Removes and returns every entry of `partition`, preserving order.
    pub fn remove_partition(&mut self, partition: &Partition) -> Vec<(String, ParamEntry)> {
        let names: Vec<String> = self.names_in(partition).map(str::to_string).collect();
        names
            .into_iter()
            .map(|n| {
                let e = self.entries.shift_remove(&n).expect("listed name");
                (n, e)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::zeros(&[2]), Partition::Base).unwrap();
        assert!(matches!(
            s.insert("w", Tensor::zeros(&[2]), Partition::Base),
            Err(Error::AlreadyExists(_))
        ));
    }

    #[test]
    fn partitions_count_and_remove() {
        let mut s = ParameterStore::new();
        s.insert("a", Tensor::zeros(&[2, 3]), Partition::Base).unwrap();
        s.insert("t.x", Tensor::zeros(&[4]), Partition::Bundle("t".into()))
            .unwrap();
        s.insert("b", Tensor::zeros(&[5]), Partition::Base).unwrap();
        assert_eq!(s.count(&Partition::Base), 11);
        let removed = s.remove_partition(&Partition::Bundle("t".into()));
        assert_eq!(removed.len(), 1);
        let names: Vec<_> = s.iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["a", "b"]);
    }
}
