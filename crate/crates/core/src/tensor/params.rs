use std::cell::RefCell;

use super::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named model state. Trainable entries receive gradients; the rest are
/// buffers such as batch-norm running statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    trainable: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.insert(name.into(), t, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.insert(name.into(), t, false)
    }

    fn insert(&mut self, name: String, mut t: Tensor, trainable: bool) -> ParamId {
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        t.round_to_f32();
        self.names.push(name);
        self.tensors.push(t);
        self.trainable.push(trainable);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    /// Replaces a tensor in place, keeping the stored shape.
    pub fn set(&mut self, id: ParamId, mut t: Tensor) {
        assert_eq!(t.shape(), self.tensors[id.0].shape(), "shape change for {}", self.names[id.0]);
        t.round_to_f32();
        self.tensors[id.0] = t;
    }

    /// Trainable element count.
    pub fn num_trainable(&self) -> usize {
        self.ids()
            .filter(|&id| self.is_trainable(id))
            .map(|id| self.get(id).numel())
            .sum()
    }
}

/// Lazily places parameters from a [`ParamStore`] onto a tape, once each.
pub struct Binder<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    track: bool,
    bound: RefCell<Vec<Option<Var<'t>>>>,
}

impl<'t, 's> Binder<'t, 's> {
    /// With `track`, trainable parameters become gradient leaves.
    pub fn new(tape: &'t Tape, store: &'s ParamStore, track: bool) -> Self {
        Binder {
            tape,
            store,
            track,
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn get(&self, id: ParamId) -> Var<'t> {
        let mut bound = self.bound.borrow_mut();
        *bound[id.0].get_or_insert_with(|| {
            let rg = self.track && self.store.is_trainable(id);
            self.tape.leaf(self.store.get(id).clone(), rg)
        })
    }

    /// Binds `id` to an existing variable instead of the stored tensor.
    pub fn preset(&self, id: ParamId, v: Var<'t>) {
        assert_eq!(v.shape(), self.store.get(id).shape(), "preset shape for {}", self.store.name(id));
        self.bound.borrow_mut()[id.0] = Some(v);
    }

    /// Gradients for every store entry that was bound and reached by
    /// backward, aligned with store ids.
    pub fn grads(&self) -> Vec<Option<Tensor>> {
        self.bound
            .borrow()
            .iter()
            .map(|v| v.and_then(|v| v.grad()))
            .collect()
    }
}
