//! Named parameter storage shared by every model component.
//!
//! Layers hold [`ParamId`]s into a [`ParamStore`]. A forward pass binds the
//! store to a [`Tape`] through [`BoundParams`], which places each parameter on
//! the tape at most once, and [`BoundParams::collect`] maps the resulting
//! gradients back onto store order.

use std::cell::RefCell;

use indexmap::IndexMap;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let (idx, _) = self.tensors.insert_full(name, value);
        Ok(ParamId(idx))
    }

    pub fn normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        self.insert(name, Tensor::randn(shape, std, rng))
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.insert(name, Tensor::full(shape, 1.0))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.tensors.get_index(id.0).map(|(n, _)| n.as_str()).expect("valid id")
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.tensors.get_index_of(name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total scalar count over every stored tensor.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Scalar count over tensors whose name starts with `prefix`.
    pub fn scalar_count_with_prefix(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// SHA-256 over the names and raw values of tensors under `prefix`.
    pub fn checksum(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.tensors.iter().filter(|(n, _)| n.starts_with(prefix)) {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    /// Copies every tensor whose name exists in `other` with the same shape.
    /// Returns the number of tensors copied; shape conflicts are errors.
    pub fn copy_matching(&mut self, other: &ParamStore) -> Result<usize> {
        let mut mismatches = Vec::new();
        let mut copied = 0;
        for (name, src) in &other.tensors {
            if let Some(dst) = self.tensors.get_mut(name) {
                if dst.shape() == src.shape() {
                    *dst = src.clone();
                    copied += 1;
                } else {
                    mismatches.push(format!("{name}: {:?} vs {:?}", dst.shape(), src.shape()));
                }
            }
        }
        if mismatches.is_empty() {
            Ok(copied)
        } else {
            Err(Error::CheckpointMismatch(mismatches))
        }
    }
}

/// Gradient per parameter, aligned with store order.
#[derive(Clone, Debug)]
pub struct GradStore {
    grads: Vec<Option<Tensor>>,
}

impl GradStore {
    pub fn empty(n: usize) -> Self {
        GradStore {
            grads: vec![None; n],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, Option<&Tensor>)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g.as_ref()))
    }

    pub fn accumulate(&mut self, other: &GradStore) {
        for (slot, g) in self.grads.iter_mut().zip(&other.grads) {
            let Some(g) = g else { continue };
            match slot {
                Some(s) => s.data_mut().iter_mut().zip(g.data()).for_each(|(s, g)| *s += g),
                None => *slot = Some(g.clone()),
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }
}

/// A [`ParamStore`] viewed through a [`Tape`].
pub struct BoundParams<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    leaves: RefCell<Vec<Option<Var<'t>>>>,
}

impl<'t, 's> BoundParams<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore) -> Self {
        BoundParams {
            tape,
            store,
            leaves: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn get(&self, id: ParamId) -> Var<'t> {
        let mut leaves = self.leaves.borrow_mut();
        *leaves[id.0].get_or_insert_with(|| self.tape.leaf(self.store.get(id).clone()))
    }

    pub fn collect(&self, mut grads: Gradients) -> GradStore {
        let leaves = self.leaves.borrow();
        GradStore {
            grads: leaves
                .iter()
                .map(|leaf| leaf.and_then(|v| grads.take(v.id())))
                .collect(),
        }
    }
}
