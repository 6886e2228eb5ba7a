//! Named parameter storage and gradient maps.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param<S> {
    pub name: String,
    pub value: Arc<Tensor<S>>,
    /// Whether decoupled weight decay applies (matrices yes; biases, norms and
    /// learned tokens no).
    pub decay: bool,
}

/// Ordered table of named parameters. Insertion order is the canonical order
/// used by checkpoints and gradient reductions.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
    index: HashMap<String, ParamId>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>, decay: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value: Arc::new(value),
            decay,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn param(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor<S>> {
        Arc::clone(&self.params[id.0].value)
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<S>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<S>) -> Result<()> {
        let current = self.get(id);
        if current.shape() != value.shape() {
            return Err(Error::ParamMismatch(format!(
                "{}: expected shape {:?}, got {:?}",
                self.name(id),
                current.shape(),
                value.shape()
            )));
        }
        self.params[id.0].value = Arc::new(value);
        Ok(())
    }

    /// Overwrites every parameter whose name starts with `prefix`.
    pub fn fill_prefix(&mut self, prefix: &str, value: S) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                let t = Arc::make_mut(&mut p.value);
                t.data_mut().iter_mut().for_each(|v| *v = value);
                n += 1;
            }
        }
        n
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: Arc::new(p.value.cast()),
                    decay: p.decay,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Bitwise equality of every value (names and shapes included).
    pub fn bit_equal(&self, other: &ParamStore<S>) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a
                        .value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.f64().to_bits() == y.f64().to_bits())
            })
    }
}

/// Gradient per parameter, ordered by parameter id.
#[derive(Debug, Clone, Default)]
pub struct GradMap<S> {
    grads: BTreeMap<ParamId, Tensor<S>>,
}

impl<S: Scalar> GradMap<S> {
    pub fn new() -> Self {
        GradMap {
            grads: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor<S>) {
        self.grads.insert(id, grad);
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<S>)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    /// Adds `other` into `self`, key by key.
    pub fn accumulate(&mut self, other: &GradMap<S>) {
        for (&id, g) in &other.grads {
            match self.grads.get_mut(&id) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.grads.insert(id, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, c: S) {
        for g in self.grads.values_mut() {
            g.scale_assign(c);
        }
    }

    /// Inserts zero gradients for every parameter of `store` that has none,
    /// so the map covers the whole store.
    pub fn complete(&mut self, store: &ParamStore<S>) {
        for (id, p) in store.iter() {
            self.grads
                .entry(id)
                .or_insert_with(|| Tensor::zeros(p.value.shape()));
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|g| g.data().iter())
            .map(|v| v.f64() * v.f64())
            .sum::<f64>()
            .sqrt()
    }
}

/// Glorot/Xavier uniform initialisation for a `[fan_in, fan_out]` matrix.
pub fn xavier_uniform<S: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    fan_in: usize,
    fan_out: usize,
) -> Tensor<S> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..fan_in * fan_out)
        .map(|_| S::of(dist.sample(rng)))
        .collect();
    Tensor::new(&[fan_in, fan_out], data).expect("shape matches")
}

pub fn normal_init<S: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<S> {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| S::of(dist.sample(rng))).collect()).expect("shape matches")
}
