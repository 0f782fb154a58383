//! Named parameters and their store.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Index of a parameter inside a [`ParamStore`]. Stable for the lifetime of
/// the store, and identical across stores built by the same constructor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

impl<T: Real> Parameter<T> {
    fn new(name: String, value: Tensor<T>, trainable: bool) -> Self {
        let grad = Tensor::from_parts(value.shape().clone(), vec![T::zero(); value.numel()]);
        Self { name, value, grad, trainable }
    }
}

static NEXT_STORE: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone)]
pub struct ParamStore<T: Real> {
    uid: u64,
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed), params: Vec::new(), by_name: HashMap::new() }
    }

    /// Distinguishes stores bound on the same graph.
    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter::new(name, value, trainable));
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| &self.params[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Replaces a value, keeping the shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.dims() != value.dims() {
            return Err(Error::shape(
                "set_value",
                format!("`{}` is {:?}, got {:?}", p.name, p.value.dims(), value.dims()),
            ));
        }
        p.value = value;
        Ok(())
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor::from_parts(p.value.shape().clone(), vec![T::zero(); p.value.numel()]);
        }
    }

    pub fn add_grad(&mut self, id: ParamId, grad: &Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.grad.dims() != grad.dims() {
            return Err(Error::shape("add_grad", format!("`{}`", p.name)));
        }
        let mut acc = std::mem::replace(&mut p.grad, Tensor::scalar(T::zero())).into_vec();
        for (a, &g) in acc.iter_mut().zip(grad.data()) {
            *a += g;
        }
        p.grad = Tensor::from_parts(grad.shape().clone(), acc);
        Ok(())
    }

    pub fn num_trainable_elements(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    /// Same names, shapes and flags at another precision. Gradients reset.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.add(p.name.clone(), p.value.cast(), p.trainable).expect("names already unique");
        }
        out
    }
}

/// He-normal initialization with fan-in scaling.
pub fn he_normal<T: Real, R: Rng + ?Sized>(rng: &mut R, dims: &[usize], fan_in: usize) -> Result<Tensor<T>> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    normal(rng, dims, std)
}

pub fn normal<T: Real, R: Rng + ?Sized>(rng: &mut R, dims: &[usize], std: f64) -> Result<Tensor<T>> {
    let dist = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| T::lit(dist.sample(rng))).collect())
}
