use std::collections::{BTreeMap, HashMap};

use super::Tensor;
use crate::error::{Error, Result};

/// An ordered, named collection of trainable tensors. A parameter's index
/// is the slot it is registered under on a [`super::Graph`].
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, slot: usize) -> &Tensor {
        &self.tensors[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.tensors[slot]
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn to_map(&self) -> BTreeMap<String, Tensor> {
        self.names
            .iter()
            .cloned()
            .zip(self.tensors.iter().cloned())
            .collect()
    }

    /// Overwrites every tensor from `map`, which must hold exactly the same
    /// names and shapes.
    pub fn load_map(&mut self, mut map: BTreeMap<String, Tensor>) -> Result<()> {
        if map.len() != self.len() {
            return Err(Error::Version(format!(
                "checkpoint holds {} parameters, model expects {}",
                map.len(),
                self.len()
            )));
        }
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            let t = map
                .remove(name)
                .ok_or_else(|| Error::Version(format!("missing parameter {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Version(format!(
                    "parameter {name}: shape {:?} vs expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            t.check_finite(name)?;
            *slot = t;
        }
        Ok(())
    }
}

/// Sum of gradients keyed by parameter slot.
#[derive(Clone, Debug, Default)]
pub struct GradAccumulator {
    grads: HashMap<usize, Tensor>,
}

impl GradAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, grads: HashMap<usize, Tensor>) {
        for (slot, g) in grads {
            match self.grads.get_mut(&slot) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.grads.insert(slot, g);
                }
            }
        }
    }

    pub fn get(&self, slot: usize) -> Option<&Tensor> {
        self.grads.get(&slot)
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            for x in g.data_mut() {
                *x *= factor;
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
