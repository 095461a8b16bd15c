use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Named parameters in insertion order, each with a trainable flag.
///
/// Frozen entries silently drop any gradient routed to them through
/// [`ParamSet::accumulate_grad`], so they never hold a gradient slot.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: IndexMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor,
        trainable: bool,
    ) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(name, Param { tensor, trainable });
        Ok(())
    }

    /// Moves every entry of `other` into `self`; names must not collide.
    pub fn extend(&mut self, other: ParamSet) -> Result<()> {
        for (name, p) in other.entries {
            self.insert(name, p.tensor, p.trainable)?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::State(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::State(format!("missing parameter `{name}`")))
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|p| p.trainable)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("missing parameter `{name}`")))?;
        p.trainable = trainable;
        if !trainable {
            p.tensor.clear_grad();
        }
        Ok(())
    }

    /// Adds `grad` to the named entry if it is trainable; no-op otherwise.
    pub fn accumulate_grad(&mut self, name: &str, grad: &[f64]) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("missing parameter `{name}`")))?;
        if p.trainable {
            p.tensor.accumulate_grad(grad)?;
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        self.entries
            .values_mut()
            .for_each(|p| p.tensor.clear_grad());
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.values().map(|p| p.tensor.len()).sum()
    }

    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Entries whose name starts with `prefix`, cloned into a new set.
    pub fn subset(&self, prefix: &str) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// SHA-256 over the little-endian bytes of one tensor's values.
    pub fn tensor_digest(&self, name: &str) -> Result<[u8; 32]> {
        let t = self.get(name)?;
        let mut h = Sha256::new();
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
        Ok(h.finalize().into())
    }

    /// SHA-256 over every name, shape and value in iteration order.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, p) in &self.entries {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for d in p.tensor.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}
