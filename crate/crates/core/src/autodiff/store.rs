use std::collections::BTreeMap;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors, each paired with a gradient slot of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    by_name: BTreeMap<String, ParamId>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            by_name: BTreeMap::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.values.len());
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.value(id))
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    #[cfg(test)]
    pub(crate) fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    /// Adds `grads` into the gradient slots.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        if grads.slots.len() > self.grads.len() {
            return Err(Error::Contract(format!(
                "gradient set has {} slots but the store holds {} parameters",
                grads.slots.len(),
                self.grads.len()
            )));
        }
        for (slot, g) in self.grads.iter_mut().zip(&grads.slots) {
            if let Some(g) = g {
                if g.shape() != slot.shape() {
                    return Err(Error::Shape {
                        op: "accumulate",
                        left: slot.shape().to_vec(),
                        right: g.shape().to_vec(),
                    });
                }
                slot.add_assign(g);
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    /// Total number of scalar parameters.
    pub fn element_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Gradients produced by one backward pass, indexed by [`ParamId`].
///
/// A `None` slot means the loss does not depend on that parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    pub(crate) slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.slots.get(id.0).and_then(Option::as_ref)
    }

    pub(crate) fn get_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.slots.get_mut(id.0).and_then(Option::as_mut)
    }

    /// Drops every slot whose parameter name is not selected by `mask`.
    pub fn retain(&mut self, store: &ParamStore, mask: &UpdateMask) {
        for (i, slot) in self.slots.iter_mut().enumerate() {
            if !mask.selects(store.name(ParamId(i))) {
                *slot = None;
            }
        }
    }
}

/// Selects parameters by name prefix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UpdateMask {
    All,
    Prefixes(Vec<String>),
}

impl UpdateMask {
    pub fn prefixes<S: AsRef<str>>(prefixes: &[S]) -> Self {
        UpdateMask::Prefixes(prefixes.iter().map(|p| p.as_ref().to_string()).collect())
    }

    pub fn selects(&self, name: &str) -> bool {
        match self {
            UpdateMask::All => true,
            UpdateMask::Prefixes(ps) => ps.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_slots_mirror_shapes() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::zeros(&[2, 3])).unwrap();
        assert!(store.insert("w", Tensor::zeros(&[1])).is_err());
        assert_eq!(store.grad(id).shape(), &[2, 3]);
        assert_eq!(store.element_count(), 6);
    }

    #[test]
    fn mask_matches_prefixes() {
        let mask = UpdateMask::prefixes(&["decoder.", "boundary."]);
        assert!(mask.selects("decoder.0.weight"));
        assert!(!mask.selects("encoder.0.weight"));
        assert!(UpdateMask::All.selects("anything"));
    }
}
