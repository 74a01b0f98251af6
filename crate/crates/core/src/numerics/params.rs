use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Grads, RngState, Scalar, Tensor};

static NEXT_STORE_UID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A named value with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Non-trainable entries (batch-norm running statistics) are stored and
    /// checkpointed but never touched by optimizers, clipping or gradients.
    pub trainable: bool,
}

/// Owns a set of parameters. Tapes refer to a store by its uid so gradients
/// from one backward pass land only in the store that was recorded.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    uid: u64,
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed), params: Vec::new() }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name: name.into(), value, grad, trainable });
        ParamId(self.params.len() - 1)
    }

    /// Adds a trainable parameter initialized uniformly in `[-range, range]`.
    pub fn add_uniform(&mut self, name: impl Into<String>, shape: &[usize], range: f64, rng: &mut RngState) -> ParamId {
        let value = Tensor::from_fn(shape, |_| T::lit(rng.range(-range, range)));
        self.add(name, value, true)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Adds every gradient in `grads` recorded against this store.
    pub fn accumulate(&mut self, grads: &Grads<T>) {
        for (store, id, g) in grads.iter() {
            if store == self.uid && self.params[id.0].trainable {
                self.params[id.0].grad.add_assign(g);
            }
        }
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    /// SHA-256 over names, shapes and value bits; stable for identical contents.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for &s in p.value.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Bitwise equality of all values (names and shapes included).
    pub fn values_equal(&self, other: &ParamStore<T>) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_f64().map(f64::to_bits) == y.to_f64().map(f64::to_bits))
            })
    }

    /// Replaces the value of `name`, checking shape.
    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self.find(name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: shape {:?} != stored {:?}",
                value.shape(),
                p.value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }
}

/// Zeroes gradients across several stores.
pub fn zero_grads<T: Scalar>(stores: &mut [&mut ParamStore<T>]) {
    for s in stores {
        s.zero_grads();
    }
}
