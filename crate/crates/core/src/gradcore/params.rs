use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use super::{Real, Tape, Tensor, Var};
use crate::error::{invalid, Result};

/// A named parameter tensor with its trainability flag and Adam slots.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup<R> {
    pub name: String,
    pub tensor: Tensor<R>,
    pub trainable: bool,
    /// First/second moment slots; allocated on the first optimizer step.
    pub slots: Option<(Tensor<R>, Tensor<R>)>,
}

impl<R: Real> ParamGroup<R> {
    pub fn new(name: impl Into<String>, tensor: Tensor<R>) -> Self {
        Self { name: name.into(), tensor, trainable: true, slots: None }
    }
}

/// Ordered collection of parameter groups addressed by dotted path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<R> {
    groups: IndexMap<String, ParamGroup<R>>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self { groups: IndexMap::new() }
    }

    pub fn insert(&mut self, group: ParamGroup<R>) -> Result<usize> {
        if self.groups.contains_key(&group.name) {
            return Err(invalid!("duplicate parameter group `{}`", group.name));
        }
        let (idx, _) = self.groups.insert_full(group.name.clone(), group);
        Ok(idx)
    }

    pub fn remove_matching(&mut self, pred: impl Fn(&str) -> bool) {
        self.groups.retain(|name, _| !pred(name));
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.groups.get_index_of(name)
    }

    pub fn get(&self, name: &str) -> Option<&ParamGroup<R>> {
        self.groups.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamGroup<R>> {
        self.groups.get_mut(name)
    }

    pub fn at(&self, idx: usize) -> &ParamGroup<R> {
        &self.groups[idx]
    }

    pub fn at_mut(&mut self, idx: usize) -> &mut ParamGroup<R> {
        &mut self.groups[idx]
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<R>> {
        self.groups
            .get(name)
            .map(|g| &g.tensor)
            .ok_or_else(|| invalid!("unknown parameter group `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamGroup<R>> {
        self.groups.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamGroup<R>> {
        self.groups.values_mut()
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for g in self.groups.values_mut() {
            g.trainable = trainable;
        }
    }

    /// Sum of element counts over groups accepted by `pred`.
    pub fn count(&self, pred: impl Fn(&ParamGroup<R>) -> bool) -> usize {
        self.groups.values().filter(|g| pred(g)).map(|g| g.tensor.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.count(|g| g.trainable)
    }

    pub fn total_count(&self) -> usize {
        self.count(|_| true)
    }

    /// Places every group on the tape; only trainable groups are tracked.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, R>) -> Vec<Var> {
        self.groups.values().map(|g| tape.leaf_ref(&g.tensor, g.trainable)).collect()
    }

    /// SHA-256 over names, dims and payload bytes of the groups accepted by
    /// `pred`, in store order.
    pub fn hash_where(&self, pred: impl Fn(&ParamGroup<R>) -> bool) -> String {
        let mut h = Sha256::new();
        for g in self.groups.values().filter(|g| pred(g)) {
            h.update((g.name.len() as u64).to_le_bytes());
            h.update(g.name.as_bytes());
            for d in g.tensor.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(g.tensor.le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn hash(&self) -> String {
        self.hash_where(|_| true)
    }

    pub fn frozen_hash(&self) -> String {
        self.hash_where(|g| !g.trainable)
    }
}
