//! Named parameter storage and its binding onto a [`Tape`].

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

/// Ordered name → tensor map. Ordering is part of the determinism contract:
/// every iteration (initialization, optimizer updates, serialization) walks
/// names lexicographically.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
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

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Keeps only the tensors whose name satisfies `keep`.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> ParamStore {
        ParamStore {
            tensors: self.tensors.iter().filter(|(k, _)| keep(k)).map(|(k, v)| (k.clone(), v.clone())).collect(),
        }
    }

    pub fn digest(&self, name: &str) -> Option<String> {
        self.get(name).map(tensor_digest)
    }

    /// Digest over every tensor whose name satisfies `select`, names included.
    pub fn group_digest(&self, select: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter().filter(|(n, _)| select(n)) {
            h.update(name.as_bytes());
            h.update([0u8]);
            h.update(tensor_digest(t).as_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// SHA-256 over shape and little-endian `f64` payload.
pub fn tensor_digest(t: &Tensor) -> String {
    let mut h = Sha256::new();
    for d in t.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    h.update(t.to_le_bytes(DType::F64));
    hex::encode(h.finalize())
}

pub fn bytes_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Parameters of one forward pass, lazily registered on the tape.
///
/// Names for which `trainable` returns false become constants and get no
/// gradient.
pub struct Bound<'a> {
    tape: &'a Tape,
    store: &'a ParamStore,
    trainable: &'a dyn Fn(&str) -> bool,
    vars: RefCell<BTreeMap<String, Var>>,
}

impl<'a> Bound<'a> {
    pub fn new(tape: &'a Tape, store: &'a ParamStore, trainable: &'a dyn Fn(&str) -> bool) -> Self {
        Self { tape, store, trainable, vars: RefCell::new(BTreeMap::new()) }
    }

    pub fn tape(&self) -> &'a Tape {
        self.tape
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    pub fn p(&self, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.borrow().get(name) {
            return Ok(*v);
        }
        let t = self
            .store
            .get(name)
            .ok_or_else(|| Error::Model(format!("missing parameter `{name}`")))?;
        let v = self.tape.leaf(t.clone(), (self.trainable)(name));
        self.vars.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every bound trainable parameter; a trainable parameter the
    /// loss does not reach gets an all-zero tensor.
    pub fn grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .borrow()
            .iter()
            .filter(|(name, _)| (self.trainable)(name))
            .map(|(name, &v)| {
                let g = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(self.tape.shape(v)));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Accumulates per-name gradient maps.
pub fn accumulate_grads(into: &mut BTreeMap<String, Tensor>, from: BTreeMap<String, Tensor>) {
    for (name, g) in from {
        match into.get_mut(&name) {
            Some(acc) => acc.add_assign(&g),
            None => {
                into.insert(name, g);
            }
        }
    }
}

pub struct Init<'r> {
    rng: &'r mut ChaCha8Rng,
}

impl<'r> Init<'r> {
    pub fn new(rng: &'r mut ChaCha8Rng) -> Self {
        Self { rng }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape.to_vec(), |_| dist.sample(self.rng))
    }

    pub fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| self.rng.random_range(lo..hi))
    }
}
