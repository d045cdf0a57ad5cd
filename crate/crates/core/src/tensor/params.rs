use std::collections::BTreeMap;

use super::{Gradients, Tape, Tensor, Var};
use crate::error::{dim_err, Result};

/// Named learnable tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

/// Parameters registered as leaves on one tape.
#[derive(Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of learnable scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    /// Registers every tensor on `tape`; `trainable = false` binds them as
    /// constants (inference).
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), tape.leaf(t.clone(), trainable)))
            .collect();
        Bound { vars }
    }

    /// Replaces values with those of `other`, which must hold the same names
    /// and shapes.
    pub fn load_from(&mut self, other: &BTreeMap<String, Tensor>) -> Result<()> {
        if other.len() != self.tensors.len() {
            return dim_err(format!(
                "parameter count mismatch: expected {}, found {}",
                self.tensors.len(),
                other.len()
            ));
        }
        for (name, t) in self.tensors.iter_mut() {
            match other.get(name) {
                Some(o) if o.shape() == t.shape() => *t = o.clone(),
                Some(o) => {
                    return dim_err(format!("parameter {}: shape {:?} vs {:?}", name, t.shape(), o.shape()))
                }
                None => return dim_err(format!("parameter {} missing", name)),
            }
        }
        Ok(())
    }
}

impl Bound {
    /// Leaf for a registered parameter. Panics on an unknown name, which is a
    /// programming error in the model code.
    /// Binds names to existing tape nodes.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(&v) => v,
            None => panic!("unknown parameter {name}"),
        }
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Pulls each parameter's gradient out of `grads`; parameters the loss
    /// does not depend on get zeros.
    pub fn collect_grads(&self, grads: &mut Gradients, store: &ParamStore) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let g = grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(store.get(k).map_or(&[][..], Tensor::shape)));
                (k.clone(), g)
            })
            .collect()
    }
}
