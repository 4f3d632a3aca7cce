//! Named parameter storage shared by the model, the optimizer, and checkpoints.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{EcupError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One stored tensor; serializes as `{shape, values, trainable}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    #[serde(flatten)]
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Ordered map from parameter path to tensor. Iteration order is the sorted
/// path order, which keeps every downstream consumer (Adam, checkpoints,
/// gradient checks) deterministic.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(EcupError::InvalidSpec(format!(
                "duplicate parameter `{}`",
                name
            )));
        }
        if !tensor.is_finite() {
            return Err(EcupError::NonFinite(format!("parameter `{}`", name)));
        }
        self.entries.insert(
            name.to_string(),
            ParamEntry { tensor, trainable },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).map(|e| e.trainable).unwrap_or(false)
    }

    /// Overwrites an existing entry's values; the shape is fixed at insert.
    pub fn set_values(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| EcupError::InvalidSpec(format!("unknown parameter `{}`", name)))?;
        if entry.tensor.shape() != tensor.shape() {
            return Err(EcupError::ShapeMismatch(format!(
                "parameter `{}` has shape {:?}, got {:?}",
                name,
                entry.tensor.shape(),
                tensor.shape()
            )));
        }
        if !tensor.is_finite() {
            return Err(EcupError::NonFinite(format!("parameter `{}`", name)));
        }
        entry.tensor = tensor;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }

    /// Stages every entry onto a tape: trainable entries as named parameter
    /// leaves, frozen entries as plain inputs. Returns the name -> Var map
    /// for graph builders.
    pub fn stage(&self, tape: &mut Tape) -> Result<BTreeMap<String, Var>> {
        let mut vars = BTreeMap::new();
        for (name, entry) in &self.entries {
            let var = if entry.trainable {
                tape.param(name, entry.tensor.clone())?
            } else {
                tape.input(entry.tensor.clone())?
            };
            vars.insert(name.clone(), var);
        }
        Ok(vars)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_duplicates_and_shape_changes() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(vec![2, 2]), true).unwrap();
        assert!(store.insert("w", Tensor::zeros(vec![2, 2]), true).is_err());
        assert!(store.set_values("w", Tensor::zeros(vec![3])).is_err());
        assert!(store.set_values("w", Tensor::full(vec![2, 2], 1.0)).is_ok());
    }

    #[test]
    fn stage_marks_only_trainable_entries() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::full(vec![2], 1.0), true).unwrap();
        store.insert("frozen", Tensor::full(vec![2], 3.0), false).unwrap();
        let mut tape = Tape::new();
        let vars = store.stage(&mut tape).unwrap();
        let a = tape.sum_all(vars["w"]).unwrap();
        let b = tape.sum_all(vars["frozen"]).unwrap();
        let loss = tape.add(a, b).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.contains_key("w"));
        assert!(!grads.contains_key("frozen"));
    }
}
