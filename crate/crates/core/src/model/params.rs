use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelError;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total element count.
    pub fn count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Element count of parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.numel())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Order-sensitive FNV-1a digest of names, shapes and raw bits of the
    /// parameters selected by `filter`.
    pub fn checksum(&self, filter: impl Fn(&str) -> bool) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        let mut buf = Vec::new();
        for (name, t) in self.params.iter().filter(|(k, _)| filter(k)) {
            feed(name.as_bytes());
            for &d in t.shape() {
                feed(&(d as u64).to_le_bytes());
            }
            buf.clear();
            for &v in t.data() {
                v.write_le(&mut buf);
            }
            feed(&buf);
        }
        h
    }
}

/// Parameter initializer with a seeded generator.
pub(crate) struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("positive std");
        Tensor::from_fn(shape, |_| T::lit(dist.sample(&mut self.rng)))
    }
}

/// Binds store parameters onto a tape on first use.
///
/// Parameters rejected by the trainable predicate are bound as constants and
/// therefore never receive gradients.
pub struct Binder<'s, T> {
    store: &'s ParamStore<T>,
    vars: HashMap<String, Var>,
    trainable: Box<dyn Fn(&str) -> bool + 's>,
}

impl<'s, T: Scalar> Binder<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self::with_trainable(store, |_| true)
    }

    pub fn frozen(store: &'s ParamStore<T>) -> Self {
        Self::with_trainable(store, |_| false)
    }

    pub fn with_trainable(store: &'s ParamStore<T>, trainable: impl Fn(&str) -> bool + 's) -> Self {
        Self {
            store,
            vars: HashMap::new(),
            trainable: Box::new(trainable),
        }
    }

    pub fn get(&mut self, tape: &mut Tape<T>, name: &str) -> Result<Var, ModelError> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self
            .store
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
        let v = tape.leaf(t.clone(), (self.trainable)(name));
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Bind `name` to an existing tape variable instead of the stored value.
    pub fn preset(&mut self, name: impl Into<String>, v: Var) {
        self.vars.insert(name.into(), v);
    }

    /// Bound parameters in name order.
    pub fn bound(&self) -> Vec<(String, Var)> {
        let mut out: Vec<_> = self.vars.iter().map(|(k, &v)| (k.clone(), v)).collect();
        out.sort();
        out
    }
}
