use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named tensor owned by a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Registry of every parameter of a model, in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::Contract(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            trainable,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    /// Element counts as `(trainable, frozen)`.
    pub fn counts(&self) -> (usize, usize) {
        self.params.iter().fold((0, 0), |(t, f), p| {
            if p.trainable {
                (t + p.tensor.numel(), f)
            } else {
                (t, f + p.tensor.numel())
            }
        })
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        let p = &mut self.params[id.0];
        p.trainable = trainable;
        if !trainable {
            p.tensor.set_requires_grad(false);
        }
    }

    /// Adds a gradient into a trainable parameter; frozen ones are skipped.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.trainable {
            p.tensor.accumulate_grad(grad)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::zeros([2]), true).unwrap();
        assert!(s.insert("a.w", Tensor::zeros([2]), false).is_err());
    }

    #[test]
    fn frozen_params_ignore_gradients() {
        let mut s = ParamStore::new();
        let f = s.insert("f", Tensor::zeros([2]), false).unwrap();
        let t = s.insert("t", Tensor::zeros([3]), true).unwrap();
        s.accumulate_grad(f, &[1.0, 1.0]).unwrap();
        s.accumulate_grad(t, &[1.0, 2.0, 3.0]).unwrap();
        assert!(s.get(f).tensor.grad().is_none());
        assert_eq!(s.get(t).tensor.grad().unwrap(), &[1.0, 2.0, 3.0]);
        assert_eq!(s.counts(), (3, 2));
    }

    #[test]
    fn toggling_trainable_conserves_total() {
        let mut s = ParamStore::new();
        let a = s.insert("a", Tensor::zeros([4]), true).unwrap();
        s.insert("b", Tensor::zeros([6]), false).unwrap();
        let before = s.counts();
        s.set_trainable(a, false);
        let after = s.counts();
        assert_eq!(before.0 + before.1, after.0 + after.1);
        assert_eq!(after, (0, 10));
    }
}
