//! Parameterized layers. Layers hold [`ParamId`]s only, so one layer
//! description drives stores of any precision built by the same constructor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::ops::GROUPNORM_EPS;
use crate::param::{he_normal, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Creates named parameters under a dotted prefix.
pub struct Builder<'a> {
    store: &'a mut ParamStore<f32>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    trainable: bool,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore<f32>, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng, prefix: String::new(), trainable: true }
    }

    /// Parameters created through this builder are excluded from training.
    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }

    pub fn scope(&mut self, name: &str) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        Builder { store: self.store, rng: self.rng, prefix, trainable: self.trainable }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn param(&mut self, name: &str, value: Tensor<f32>) -> Result<ParamId> {
        let full = self.full_name(name);
        self.store.add(full, value, self.trainable)
    }

    pub fn he(&mut self, name: &str, dims: &[usize], fan_in: usize) -> Result<ParamId> {
        let t = he_normal(self.rng, dims, fan_in)?;
        self.param(name, t)
    }

    pub fn constant(&mut self, name: &str, dims: &[usize], value: f32) -> Result<ParamId> {
        self.param(name, Tensor::full(dims, value)?)
    }
}

/// Seeded generator used for every weight initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv2d {
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, k: usize, stride: usize, groups: usize, bias: bool) -> Result<Self> {
        let mut s = b.scope(name);
        let cin_g = cin / groups;
        let weight = s.he("weight", &[cout, cin_g, k, k], cin_g * k * k)?;
        let bias = if bias { Some(s.constant("bias", &[cout], 0.0)?) } else { None };
        Ok(Self { weight, bias, stride, pad: k / 2, groups })
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(s, self.weight);
        let b = self.bias.map(|id| g.param(s, id));
        g.conv2d(x, w, b, self.stride, self.pad, self.groups)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

/// Eight groups where the width allows it.
pub fn norm_groups(channels: usize) -> usize {
    (1..=8).rev().find(|g| channels % g == 0).unwrap_or(1)
}

impl GroupNorm {
    pub fn new(b: &mut Builder, name: &str, channels: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            gamma: s.constant("gamma", &[channels], 1.0)?,
            beta: s.constant("beta", &[channels], 0.0)?,
            groups: norm_groups(channels),
        })
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        g.group_norm(x, g.param(s, self.gamma), g.param(s, self.beta), self.groups, T::lit(GROUPNORM_EPS))
    }
}

/// Bias-free convolution, group norm, ReLU.
#[derive(Debug, Clone)]
pub struct ConvNormRelu {
    pub conv: Conv2d,
    pub norm: GroupNorm,
}

impl ConvNormRelu {
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self { conv: Conv2d::new(&mut s, "conv", cin, cout, k, stride, 1, false)?, norm: GroupNorm::new(&mut s, "norm", cout)? })
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, s, x)?;
        let y = self.norm.forward(g, s, y)?;
        g.relu(y)
    }
}

/// Spatial extents `(H, W)` of a `[B,C,H,W]` value.
pub fn spatial<T: Real>(g: &Graph<T>, x: Var) -> (usize, usize) {
    let d = g.dims(x);
    (d[2], d[3])
}
