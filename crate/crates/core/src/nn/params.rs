use std::ops::Index;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    /// Replaces the values of an existing tensor, keeping its shape.
    pub fn set(&mut self, id: ParamId, values: Tensor<T>) -> Result<()> {
        let slot = &mut self.tensors[id.0];
        if slot.shape() != values.shape() {
            return Err(Error::invalid(format!(
                "parameter {} has shape {:?}, got {:?}",
                self.names[id.0],
                slot.shape(),
                values.shape()
            )));
        }
        *slot = values.with_requires_grad(true);
        Ok(())
    }

    /// Total scalar count, by walking every stored tensor.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every tensor on `tape` as a gradient-receiving leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bindings {
        Bindings(self.tensors.iter().map(|t| tape.param(t)).collect())
    }

    /// Registers every tensor as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bindings {
        Bindings(self.tensors.iter().map(|t| tape.constant(t)).collect())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Order-sensitive FNV-1a digest of names, shapes and bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        let mut buf = Vec::new();
        for (name, t) in self.iter() {
            eat(name.as_bytes());
            for &d in t.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            buf.clear();
            for &v in t.data() {
                v.write_le(&mut buf);
            }
            eat(&buf);
        }
        h
    }
}

/// Tape handles of a bound [`ParamStore`], indexable by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bindings(Vec<Var>);

impl Bindings {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bindings(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bindings {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Seeded parameter factory. Values are drawn in f64 and cast, so a seed
/// yields the same model up to rounding in either precision.
pub struct Initializer<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<'a, T: Real> Initializer<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Initializer {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn add(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<ParamId> {
        let t = Tensor::new(shape.to_vec(), values.into_iter().map(T::of).collect())?;
        self.store.insert(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        self.add(name, shape, vec![value; n])
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.constant(name, shape, 0.0)
    }

    /// Normal(0, std) truncated to ±2 std by rejection.
    pub fn trunc_normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        while values.len() < n {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            if z.abs() <= 2.0 {
                values.push(z * std);
            }
        }
        self.add(name, shape, values)
    }

    /// Normal(0, sqrt(2 / fan_in)).
    pub fn fan_in_normal(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let values = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                z * std
            })
            .collect();
        self.add(name, shape, values)
    }
}
