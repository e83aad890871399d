//! Named parameter storage shared by the backbone, optimizer and checkpoints.

use std::collections::HashMap;

use crate::backbone::BranchId;
use crate::tensorgrad::{Tape, Tensor, TensorError, Var};

/// Whether a parameter belongs to every branch or to one branch only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ParamScope {
    Shared,
    Branch(BranchId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub scope: ParamScope,
}

/// Insertion-ordered parameter set; the order fixes checkpoint layout.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, scope: ParamScope) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, value, scope });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].value)
    }

    pub fn value_at_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].value
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Records every parameter as a leaf of `tape`, in store order.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Result<Bound, TensorError> {
        let vars = self
            .entries
            .iter()
            .map(|e| tape.leaf(e.value.clone(), requires_grad))
            .collect::<Result<_, _>>()?;
        Ok(Bound { vars })
    }
}

/// Tape handles of a bound [`ParamStore`], indexed like the store.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients accumulated on `tape` for each parameter (`None` if unreached).
    pub fn grads(&self, tape: &Tape) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| tape.grad(v).cloned()).collect()
    }
}
