use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Scalar, Tape, Tensor, Var};

/// Index of a named tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    buffer: bool,
}

/// Named model tensors. Buffers (batch-norm running statistics) live here
/// too but are never touched by the optimizer.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn insert(&mut self, name: &str, value: Tensor<T>, buffer: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        let id = self.entries.len();
        self.entries.push(Entry {
            name: name.to_owned(),
            value,
            buffer,
        });
        self.index.insert(name.to_owned(), id);
        Ok(ParamId(id))
    }

    pub fn add_param(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        self.insert(name, value, false)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        self.insert(name, value, true)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_buffer(&self, id: ParamId) -> bool {
        self.entries[id.0].buffer
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    /// Replaces a tensor by name; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Input(format!("unknown parameter `{name}`")))?;
        let slot = &mut self.entries[id.0].value;
        if slot.shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// Number of trainable scalars (buffers excluded).
    pub fn num_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| !e.buffer)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    buffer: e.buffer,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Batch-norm layer handles: affine parameters plus running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BnIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

/// Binds store tensors onto a tape for one forward pass.
///
/// Each parameter becomes a leaf the first time it is used; it requires a
/// gradient only if `trainable` says so, which keeps frozen subgraphs out
/// of the backward sweep entirely.
pub struct Binder<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    store: &'a ParamStore<T>,
    trainable: Vec<bool>,
    bound: Vec<Option<Var>>,
    bn_stats: Vec<(BnIds, BatchStats<T>)>,
}

impl<'a, T: Scalar> Binder<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, trainable: Vec<bool>) -> Result<Self> {
        if trainable.len() != store.len() {
            return Err(Error::Contract(format!(
                "trainable mask has {} entries for {} parameters",
                trainable.len(),
                store.len()
            )));
        }
        Ok(Self {
            tape,
            store,
            trainable,
            bound: vec![None; store.len()],
            bn_stats: Vec::new(),
        })
    }

    /// Binder for inference: nothing requires a gradient.
    pub fn frozen(tape: &'a mut Tape<T>, store: &'a ParamStore<T>) -> Self {
        let n = store.len();
        Self::new(tape, store, vec![false; n]).expect("mask sized to store")
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Uses `var` in place of the stored value of `id` (for gradient checks
    /// with respect to parameters).
    pub fn bind_as(&mut self, id: ParamId, var: Var) -> Result<()> {
        if self.tape.shape(var) != self.store.get(id).shape() {
            return Err(Error::Dimension(format!(
                "cannot bind {:?} to `{}` of shape {:?}",
                self.tape.shape(var),
                self.store.name(id),
                self.store.get(id).shape()
            )));
        }
        self.bound[id.0] = Some(var);
        Ok(())
    }

    pub fn var(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = self.tape.leaf(value, self.trainable[id.0]);
        self.bound[id.0] = Some(v);
        v
    }

    /// Leaves created for parameters so far, by id.
    pub fn bound(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }

    pub(crate) fn record_stats(&mut self, ids: BnIds, stats: BatchStats<T>) {
        self.bn_stats.push((ids, stats));
    }

    pub fn take_bn_stats(&mut self) -> Vec<(BnIds, BatchStats<T>)> {
        std::mem::take(&mut self.bn_stats)
    }
}

/// Folds batch statistics into running averages with the given momentum.
pub fn update_running_stats<T: Scalar>(
    store: &mut ParamStore<T>,
    stats: &[(BnIds, BatchStats<T>)],
    momentum: T,
) {
    for (ids, s) in stats {
        for (r, &b) in store.get_mut(ids.running_mean).data_mut().iter_mut().zip(&s.mean) {
            *r = (T::one() - momentum) * *r + momentum * b;
        }
        for (r, &b) in store.get_mut(ids.running_var).data_mut().iter_mut().zip(&s.var) {
            *r = (T::one() - momentum) * *r + momentum * b;
        }
    }
}
