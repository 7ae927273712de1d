use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParamStore`]. Stable for the lifetime of
/// the store (entries are never removed).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(u32);

impl ParamId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    name: String,
    tensor: Tensor,
    trainable: bool,
}

impl ParamEntry {
    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }
    pub fn trainable(&self) -> bool {
        self.trainable
    }
}

/// Ordered map from hierarchical parameter name to tensor plus trainable
/// flag. Iteration follows registration order, which keeps every downstream
/// reduction deterministic. A `trainable = false` entry never carries
/// gradient storage and is never touched by an optimizer; that is the freeze
/// contract every model in the crate relies on.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, mut tensor: Tensor, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        tensor.set_requires_grad(trainable);
        let id = ParamId(self.entries.len() as u32);
        self.index.insert(name.to_string(), id.index());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            tensor,
            trainable,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i as u32))
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.index()]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.index()].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.index()].tensor
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    /// Overwrites the values of an existing entry; shape must match.
    pub fn set_data(&mut self, name: &str, data: &[f64]) -> Result<()> {
        let id = self.id(name)?;
        let t = &mut self.entries[id.index()].tensor;
        if t.numel() != data.len() {
            return Err(Error::InvalidTensor(format!(
                "parameter `{name}` has {} elements, checkpoint supplies {}",
                t.numel(),
                data.len()
            )));
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }

    /// Marks every entry non-trainable and drops any gradient storage.
    pub fn freeze_all(&mut self) {
        for e in &mut self.entries {
            e.trainable = false;
            e.tensor.set_requires_grad(false);
        }
    }

    /// Test-fixture hook for the freeze audit: flips one entry trainable.
    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let id = self.id(name)?;
        let e = &mut self.entries[id.index()];
        e.trainable = trainable;
        e.tensor.set_requires_grad(trainable);
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.clear_grad();
        }
    }

    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn trainable_params(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Registers every entry as a leaf on `tape`; gradients flow to trainable
    /// entries only.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        Binding {
            vars: self
                .entries
                .iter()
                .map(|e| tape.leaf(e.tensor.clone()))
                .collect(),
        }
    }

    /// Same as [`ParamStore::bind`] but with gradient tracking disabled for
    /// every entry — the inference path.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Binding {
        Binding {
            vars: self
                .entries
                .iter()
                .map(|e| tape.constant(e.tensor.clone()))
                .collect(),
        }
    }

    /// Accumulates gradients computed on `tape` back into trainable entries.
    pub fn export_grads(&mut self, tape: &Tape, binding: &Binding) {
        for (e, &var) in self.entries.iter_mut().zip(&binding.vars) {
            if !e.trainable {
                continue;
            }
            if let Some(g) = tape.grad(var) {
                e.tensor.accumulate_grad(g);
            }
        }
    }
}

/// Tape-registered leaves for one store, index-aligned with its entries.
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }
}

// ---- initializers ----------------------------------------------------------

pub fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) * std)
        .collect();
    Tensor::new(shape, data).expect("init shape")
}

pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) * std)
        .collect();
    Tensor::new(shape, data).expect("init shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.register("w", Tensor::zeros(&[2]), true).unwrap();
        assert!(matches!(
            store.register("w", Tensor::zeros(&[2]), true),
            Err(Error::DuplicateParam(_))
        ));
    }

    #[test]
    fn freeze_drops_grad_storage() {
        let mut store = ParamStore::new();
        let id = store.register("w", Tensor::zeros(&[2]), true).unwrap();
        store.tensor_mut(id).accumulate_grad(&[1.0, 1.0]);
        store.freeze_all();
        assert!(store.tensor(id).grad().is_none());
        assert!(!store.tensor(id).requires_grad());
    }

    #[test]
    fn export_reaches_only_trainable_entries() {
        let mut store = ParamStore::new();
        let live = store.register("live", Tensor::full(&[2], 1.0), true).unwrap();
        let frozen = store
            .register("frozen", Tensor::full(&[2], 2.0), false)
            .unwrap();
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let prod = tape.mul(bind.var(live), bind.var(frozen)).unwrap();
        let loss = tape.sum(prod).unwrap();
        tape.backward(loss).unwrap();
        store.export_grads(&tape, &bind);
        assert_eq!(store.tensor(live).grad().unwrap(), &[2.0, 2.0]);
        assert!(store.tensor(frozen).grad().is_none());
    }
}
