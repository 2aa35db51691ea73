//! Named parameters with gradient slots.
//!
//! Names are namespaced: `shared/...` for parameters used by every task and
//! `task/<id>/...` for task-private ones.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SHARED_PREFIX: &str = "shared/";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub frozen: bool,
}

/// Insertion-ordered parameter registry.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter {name}")));
        }
        if !value.is_finite() {
            return Err(Error::contract(format!("parameter {name} is not finite")));
        }
        let id = ParamId(self.params.len());
        let (r, c) = value.shape();
        self.params.push(Param {
            name: name.clone(),
            value,
            grad: Tensor::zeros(r, c),
            frozen: false,
        });
        self.index.insert(name, id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&Param> {
        Ok(self.get(self.id(name)?))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.by_name(name)?.value)
    }

    /// Overwrites a value; the shape must not change.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self.id(name)?;
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_value",
                left: p.value.shape(),
                right: value.shape(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds a gradient map into the gradient slots.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.iter() {
            self.params[id.0].grad.add_assign(g);
        }
    }

    /// Marks every parameter whose name starts with one of `prefixes` as frozen.
    pub fn freeze_prefixes<S: AsRef<str>>(&mut self, prefixes: &[S]) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if prefixes.iter().any(|pre| p.name.starts_with(pre.as_ref())) {
                p.frozen = true;
                n += 1;
            }
        }
        n
    }

    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// SHA-256 over names, shapes and little-endian values of the parameters
    /// selected by `filter`, in insertion order.
    pub fn digest(&self, filter: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| filter(&p.name)) {
            h.update((p.name.len() as u64).to_le_bytes());
            h.update(p.name.as_bytes());
            h.update((p.value.rows() as u64).to_le_bytes());
            h.update((p.value.cols() as u64).to_le_bytes());
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Sparse map of parameter gradients produced by one backward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn add(&mut self, id: ParamId, g: &Tensor) {
        match self.grads.get_mut(&id) {
            Some(acc) => acc.add_assign(g),
            None => {
                self.grads.insert(id, g.clone());
            }
        }
    }

    pub fn insert(&mut self, id: ParamId, g: Tensor) {
        self.grads.insert(id, g);
    }

    /// `self += other`, in `other`'s key order.
    pub fn merge(&mut self, other: &Gradients) {
        for (id, g) in other.iter() {
            self.add(id, g);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.values_mut() {
            g.scale_in_place(c);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.values().map(Tensor::squared_norm).sum::<f64>().sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`. Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }
}

/// I.i.d. uniform entries in `[lo, hi)`.
pub fn init_uniform<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    lo: f64,
    hi: f64,
    rng: &mut R,
) -> Result<Tensor> {
    // `!(lo < hi)` also rejects NaN bounds.
    if !(lo < hi) {
        return Err(Error::contract(format!(
            "init_uniform needs lo < hi, got [{lo}, {hi})"
        )));
    }
    let data = (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(rows, cols, data)
}
