//! Named parameter store plus the binder that connects parameters to graph
//! leaves during a forward pass.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Ordered collection of named parameter tensors. Insertion order is the
/// canonical order for checkpoints and optimizer state, so construction must
/// be deterministic. The version counter increments on every mutation and
/// backs the stale-cache check for cached label encodings.
#[derive(Clone)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
    version: u64,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
            index: HashMap::new(),
            version: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor.with_grad()));
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let idx = self.index[name];
        &self.entries[idx].1
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    /// Mutable access bumps the version: any cached encoding becomes stale.
    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.version += 1;
        let idx = self.index[name];
        &mut self.entries[idx].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut_raw(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.entries.iter_mut() {
            t.zero_grad();
        }
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Tracks which parameters a graph bound as leaves. Binding the same name
/// twice returns the same `Var`, which is exactly what weight sharing between
/// the text and label branches requires: gradients from both branches
/// accumulate at the one leaf.
#[derive(Default)]
pub struct Binder {
    bound: Vec<(String, Var)>,
    lookup: HashMap<String, Var>,
}

impl Binder {
    pub fn new() -> Self {
        Binder::default()
    }

    pub fn bind(&mut self, g: &mut Graph, params: &ParamSet, name: &str) -> Var {
        if let Some(&v) = self.lookup.get(name) {
            return v;
        }
        let v = g.leaf(params.get(name).clone(), true);
        self.lookup.insert(name.to_string(), v);
        self.bound.push((name.to_string(), v));
        v
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.lookup.get(name).copied()
    }

    /// Copies gradients from the graph into the parameter store
    /// (accumulating, so call `zero_grads` between steps).
    pub fn harvest(&self, g: &Graph, params: &mut ParamSet) -> Result<()> {
        for (name, var) in &self.bound {
            if let Some(grad) = g.grad(*var) {
                if grad.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Divergence(format!(
                        "non-finite gradient for parameter {name}"
                    )));
                }
                // Harvesting must not look like a weight update, so write
                // through the raw entry without bumping the version.
                let idx = params.index[name.as_str()];
                params.entries[idx].1.accumulate_grad(grad);
            }
        }
        Ok(())
    }
}
