//! Named parameter storage and the per-forward binding of parameters onto a
//! tape.

use awb_tensor::{BatchStats, Graph, Real, Tensor, Var};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Which part of the model a tensor belongs to; freezing works per group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    Attention,
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    /// Learned by gradient descent.
    Weight,
    /// Running statistics; never receives a gradient.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub group: ParamGroup,
    pub role: ParamRole,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, group: ParamGroup, role: ParamRole) -> ParamId {
        self.entries.push(ParamEntry { name: name.into(), value, group, role });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) {
        self.entries[id.0].value = value;
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
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

    /// Number of learnable scalars, optionally restricted to one group.
    pub fn weight_count(&self, group: Option<ParamGroup>) -> usize {
        self.entries
            .iter()
            .filter(|e| e.role == ParamRole::Weight && group.is_none_or(|g| e.group == g))
            .map(|e| e.value.numel())
            .sum()
    }

    /// Same names, shapes, groups and roles.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name && a.value.shape() == b.value.shape() && a.group == b.group && a.role == b.role
            })
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), value: e.value.cast(), group: e.group, role: e.role })
                .collect(),
        }
    }
}

/// Whether the model runs in training or inference mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which parameter groups receive gradients in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub backbone: bool,
    pub attention: bool,
    pub head: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable { backbone: true, attention: true, head: true };
    pub const NONE: Trainable = Trainable { backbone: false, attention: false, head: false };
    pub const ATTENTION_ONLY: Trainable = Trainable { backbone: false, attention: true, head: false };

    pub fn allows(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Backbone => self.backbone,
            ParamGroup::Attention => self.attention,
            ParamGroup::Head => self.head,
        }
    }
}

pub(crate) struct BnUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats<T>,
}

/// Forward-pass context: the tape, lazily bound parameters and pending
/// running-statistics updates.
pub struct Ctx<'a, T: Real> {
    pub graph: &'a mut Graph<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    pub mode: Mode,
    pub trainable: Trainable,
    pub(crate) bn_updates: Vec<BnUpdate<T>>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(graph: &'a mut Graph<T>, store: &'a ParamStore<T>, mode: Mode, trainable: Trainable) -> Self {
        Self { graph, store, bound: vec![None; store.len()], mode, trainable, bn_updates: Vec::new() }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    /// Tape variable for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let entry = self.store.entry(id);
        let learn = entry.role == ParamRole::Weight && self.trainable.allows(entry.group);
        let v = self.graph.leaf(entry.value.clone(), learn);
        self.bound[id.0] = Some(v);
        v
    }

    /// Route a parameter to an existing tape variable instead of a fresh
    /// leaf, e.g. to differentiate with respect to externally owned inputs.
    pub fn bind(&mut self, id: ParamId, var: Var) -> Result<()> {
        let expected = self.store.get(id).shape();
        if self.graph.shape(var) != expected {
            return Err(invalid!(
                "cannot bind {} with shape {:?} to a variable of shape {:?}",
                self.store.entry(id).name,
                expected,
                self.graph.shape(var)
            ));
        }
        self.bound[id.0] = Some(var);
        Ok(())
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        !self.trainable.allows(self.store.entry(id).group)
    }

    pub fn finish(self) -> Binding<T> {
        Binding {
            vars: self.bound.iter().enumerate().filter_map(|(i, v)| v.map(|v| (ParamId(i), v))).collect(),
            bn_updates: self.bn_updates,
        }
    }
}

/// Parameters bound during one forward pass.
pub struct Binding<T> {
    pub vars: Vec<(ParamId, Var)>,
    pub(crate) bn_updates: Vec<BnUpdate<T>>,
}

impl<T: Real> Binding<T> {
    pub fn var(&self, id: ParamId) -> Option<Var> {
        self.vars.iter().find(|(p, _)| *p == id).map(|(_, v)| *v)
    }

    /// Fold the batch statistics into the running estimates.
    pub(crate) fn apply_bn_updates(&mut self, store: &mut ParamStore<T>, momentum: f64) {
        let m = T::of(momentum);
        for u in self.bn_updates.drain(..) {
            for (id, batch) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
                let running = store.get_mut(id);
                for (r, b) in running.data_mut().iter_mut().zip(batch.data()) {
                    *r = (T::one() - m) * *r + m * *b;
                }
            }
        }
    }
}

pub(crate) fn check_channels(actual: usize, expected: usize, what: &str) -> Result<()> {
    if actual != expected {
        return Err(invalid!("{what} expects {expected} channels, got {actual}"));
    }
    Ok(())
}
