//! Named parameter storage and per-pass binding of parameters onto a tape.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Persisted state that is not trained (power-iteration vectors, frozen
    /// random features, covariance).
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.push(name.into(), value, ParamKind::Trainable)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.push(name.into(), value, ParamKind::Buffer)
    }

    fn push(&mut self, name: String, value: Tensor<T>, kind: ParamKind) -> ParamId {
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, value, kind });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::shape("ParamStore::set", e.value.shape(), value.shape()));
        }
        e.value = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&i| self.kind(i) == ParamKind::Trainable)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    kind: e.kind,
                })
                .collect(),
        }
    }
}

/// A forward pass in progress: a fresh tape plus lazily bound parameters.
pub struct Session<'s, T: Real> {
    pub g: Graph<T>,
    store: &'s ParamStore<T>,
    vars: Vec<Option<Var>>,
    frozen: Option<&'s HashSet<ParamId>>,
}

impl<'s, T: Real> Session<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self {
            g: Graph::new(),
            store,
            vars: vec![None; store.len()],
            frozen: None,
        }
    }

    /// Parameters in `frozen` are placed on the tape as constants.
    pub fn with_frozen(store: &'s ParamStore<T>, frozen: &'s HashSet<ParamId>) -> Self {
        Self {
            frozen: Some(frozen),
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    /// The tape variable for parameter `id`, binding it on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let trainable = self.store.kind(id) == ParamKind::Trainable
            && !self.frozen.is_some_and(|f| f.contains(&id));
        let v = if trainable {
            self.g.param(value)
        } else {
            self.g.constant(value)
        };
        self.vars[id.0] = Some(v);
        v
    }

    pub fn buffer(&self, id: ParamId) -> &'s Tensor<T> {
        self.store.get(id)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.g.constant(t)
    }

    /// Gradients for every trainable parameter that took part in the pass.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<(ParamId, Vec<T>)> {
        let mut out = Vec::new();
        for (i, v) in self.vars.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = grads.take(*v) {
                    out.push((ParamId(i), g));
                }
            }
        }
        out
    }
}
