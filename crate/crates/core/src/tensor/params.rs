use indexmap::IndexMap;

use super::{Float, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// State carried alongside the weights (running statistics, target
    /// normalization) that the optimizer never touches.
    Buffer,
}

/// Named tensors in insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Float = f32> {
    entries: IndexMap<String, (Tensor<T>, ParamKind)>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, kind: ParamKind) {
        self.entries.insert(name.into(), (tensor, kind));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries.get(name).map(|(t, _)| t).ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|(t, _)| t).ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    /// Two distinct entries borrowed mutably at once.
    pub fn get_pair_mut(&mut self, a: &str, b: &str) -> Result<(&mut Tensor<T>, &mut Tensor<T>)> {
        let ia = self.index_of(a)?;
        let ib = self.index_of(b)?;
        if ia == ib {
            return Err(Error::Contract(format!("`{a}` requested twice")));
        }
        let [x, y] = self.entries.get_disjoint_indices_mut([ia, ib]).map_err(|e| Error::Contract(e.to_string()))?;
        Ok((&mut x.1 .0, &mut y.1 .0))
    }

    fn index_of(&self, name: &str) -> Result<usize> {
        self.entries.get_index_of(name).ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.entries.get(name).map(|(_, k)| *k)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>, ParamKind)> {
        self.entries.iter().map(|(n, (t, k))| (n.as_str(), t, *k))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.iter().filter(|(_, _, k)| *k == ParamKind::Trainable).map(|(n, t, _)| (n, t))
    }

    /// Element count over trainable entries.
    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore { entries: self.entries.iter().map(|(n, (t, k))| (n.clone(), (t.cast(), *k))).collect() }
    }

    /// Overwrites entries from `tensors`, which must cover every entry with
    /// identical shapes; unknown names are rejected.
    pub fn load(&mut self, tensors: &IndexMap<String, Tensor<T>>) -> Result<()> {
        for (name, t) in tensors {
            let slot = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("weights contain unknown tensor `{name}`")))?;
            if slot.0.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "tensor `{name}` has shape {:?}, network expects {:?}",
                    t.shape(),
                    slot.0.shape()
                )));
            }
            slot.0 = t.clone();
        }
        if let Some(missing) = self.entries.keys().find(|k| !tensors.contains_key(*k)) {
            return Err(Error::Config(format!("weights are missing tensor `{missing}`")));
        }
        Ok(())
    }
}
