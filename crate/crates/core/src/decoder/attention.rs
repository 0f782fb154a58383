//! Spatial differential attention and channel (transposed) attention.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{spatial, Builder, Conv2d};
use crate::ops::{Reduce, RMSNORM_EPS};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Real;

pub const WINDOW: usize = 8;
pub const HALO: usize = 2;
/// Initial λ of every head.
pub const LAMBDA_INIT: f64 = 0.5;
const L2_EPS: f64 = 1e-12;

/// `[Bw, H*2d, N]` token layout to `[Bw*H, N, 2d]` per-head rows.
fn to_heads<T: Real>(g: &Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let d = g.dims(x);
    let (bw, c2, n) = (d[0], d[1], d[2]);
    let x = g.reshape(x, &[bw, heads, c2 / heads, n])?;
    let x = g.permute(x, &[0, 1, 3, 2])?;
    g.reshape(x, &[bw * heads, n, c2 / heads])
}

/// Inverse of [`to_heads`].
fn from_heads<T: Real>(g: &Graph<T>, x: Var, batch: usize, heads: usize) -> Result<Var> {
    let d = g.dims(x);
    let (n, w) = (d[1], d[2]);
    let x = g.reshape(x, &[batch, heads, n, w])?;
    let x = g.permute(x, &[0, 1, 3, 2])?;
    g.reshape(x, &[batch, heads * w, n])
}

/// Multiplies `[Bw*H, ...]` rows by a per-head factor of shape `[H]`.
fn scale_heads<T: Real>(g: &Graph<T>, x: Var, factor: Var, heads: usize) -> Result<Var> {
    let d = g.dims(x);
    let rows = d[0] / heads;
    let rest: usize = d[1..].iter().product();
    let x3 = g.reshape(x, &[rows, heads, rest])?;
    let f = g.reshape(factor, &[1, heads, 1])?;
    g.reshape(g.mul(x3, f)?, &d)
}

/// Per-head `(A1 - λ A2) V` for token-major inputs.
///
/// `q` and `k` are `[Bw, H*2d, Nq]` and `[Bw, H*2d, Nk]`, split per head into
/// halves of width d; `v` is `[Bw, H*2d, Nk]`; `lambda` has shape `[H]`.
/// Returns `[Bw*H, Nq, 2d]`.
pub fn differential_attention<T: Real>(g: &Graph<T>, q: Var, k: Var, v: Var, lambda: Var, heads: usize) -> Result<Var> {
    let c2 = g.dims(q)[1];
    if c2 % (2 * heads) != 0 {
        return Err(Error::invalid(format!("{c2} query channels do not split into {heads} heads of two halves")));
    }
    let d = c2 / heads / 2;
    let (q, k, v) = (to_heads(g, q, heads)?, to_heads(g, k, heads)?, to_heads(g, v, heads)?);
    let q = g.split(q, 2, &[d, d])?;
    let k = g.split(k, 2, &[d, d])?;
    let inv = T::lit(1.0 / (d as f64).sqrt());
    let a1 = g.softmax(g.scale(g.matmul_batched_nt(q[0], k[0])?, inv)?, 2)?;
    let a2 = g.softmax(g.scale(g.matmul_batched_nt(q[1], k[1])?, inv)?, 2)?;
    let a = g.sub(a1, scale_heads(g, a2, lambda, heads)?)?;
    g.matmul_batched(a, v)
}

#[derive(Debug, Clone)]
pub struct SpatialDiffAttention {
    pub qkv: Conv2d,
    pub rho: ParamId,
    pub norm_gain: ParamId,
    pub proj: Conv2d,
    pub heads: usize,
    pub channels: usize,
}

impl SpatialDiffAttention {
    pub fn new(b: &mut Builder, name: &str, channels: usize, heads: usize) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::invalid(format!("{channels} channels do not split into {heads} heads")));
        }
        let mut s = b.scope(name);
        let head_width = 2 * channels / heads;
        Ok(Self {
            qkv: Conv2d::new(&mut s, "qkv", channels, 6 * channels, 1, 1, 1, false)?,
            rho: s.constant("rho", &[heads], LAMBDA_INIT.ln() as f32)?,
            norm_gain: s.constant("norm_gain", &[head_width], 1.0)?,
            proj: Conv2d::new(&mut s, "proj", 2 * channels, channels, 1, 1, 1, false)?,
            heads,
            channels,
        })
    }

    pub fn lambda<T: Real>(&self, g: &Graph<T>, s: &ParamStore<T>) -> Result<Var> {
        g.exp(g.param(s, self.rho))
    }

    /// Attention output before the per-head norm: `[B*nWin*H, Nq, 2d]`, with
    /// the window grid used.
    pub fn attend<T: Real>(&self, g: &Graph<T>, s: &ParamStore<T>, x: Var) -> Result<(Var, Option<(usize, usize)>)> {
        let dims = g.dims(x);
        if dims.len() != 4 || dims[1] != self.channels {
            return Err(Error::shape("spatial_attention", format!("expected {} channels, got {dims:?}", self.channels)));
        }
        let (b, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
        let qkv = self.qkv.forward(g, s, x)?;
        let parts = g.split(qkv, 1, &[2 * c, 2 * c, 2 * c])?;
        let lambda = self.lambda(g, s)?;
        if h <= WINDOW && w <= WINDOW {
            let tok = |v: Var| g.reshape(v, &[b, 2 * c, h * w]);
            let out = differential_attention(g, tok(parts[0])?, tok(parts[1])?, tok(parts[2])?, lambda, self.heads)?;
            return Ok((out, None));
        }
        let q = g.extract_windows(parts[0], WINDOW, 0)?;
        let k = g.extract_windows(parts[1], WINDOW, HALO)?;
        let v = g.extract_windows(parts[2], WINDOW, HALO)?;
        let bw = g.dims(q)[0];
        let span = WINDOW + 2 * HALO;
        let q = g.reshape(q, &[bw, 2 * c, WINDOW * WINDOW])?;
        let k = g.reshape(k, &[bw, 2 * c, span * span])?;
        let v = g.reshape(v, &[bw, 2 * c, span * span])?;
        let out = differential_attention(g, q, k, v, lambda, self.heads)?;
        Ok((out, Some((h, w))))
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let batch = g.dims(x)[0];
        let (h, w) = spatial(g, x);
        let (att, windows) = self.attend(g, s, x)?;
        let normed = g.rmsnorm(att, g.param(s, self.norm_gain), 2, T::lit(RMSNORM_EPS))?;
        let rows = g.dims(normed)[0] / self.heads;
        let tokens = from_heads(g, normed, rows, self.heads)?;
        let c2 = 2 * self.channels;
        let map = match windows {
            None => g.reshape(tokens, &[batch, c2, h, w])?,
            Some(_) => {
                let tiles = g.reshape(tokens, &[rows, c2, WINDOW, WINDOW])?;
                g.merge_windows(tiles, batch, h, w)?
            }
        };
        self.proj.forward(g, s, map)
    }
}

/// Rows scaled to unit L2 norm along the last axis.
fn l2_normalize<T: Real>(g: &Graph<T>, x: Var) -> Result<Var> {
    let rank = g.dims(x).len();
    let ss = g.reduce(g.square(x)?, &[rank - 1], Reduce::Sum, true)?;
    let norm = g.sqrt(g.shift(ss, T::lit(L2_EPS))?)?;
    g.div(x, norm)
}

/// Per head, `softmax(τ q̂ k̂ᵀ) v` with channels as tokens. Inputs are
/// `[B, C, N]`, `tau` has shape `[H]`; returns `[B, C, N]`.
pub fn channel_attention_core<T: Real>(g: &Graph<T>, q: Var, k: Var, v: Var, tau: Var, heads: usize) -> Result<Var> {
    let d = g.dims(q);
    let (b, c, n) = (d[0], d[1], d[2]);
    if c % heads != 0 {
        return Err(Error::invalid(format!("{c} channels do not split into {heads} heads")));
    }
    let rows = |x: Var| g.reshape(x, &[b * heads, c / heads, n]);
    let q = l2_normalize(g, rows(q)?)?;
    let k = l2_normalize(g, rows(k)?)?;
    let scores = scale_heads(g, g.matmul_batched_nt(q, k)?, tau, heads)?;
    let a = g.softmax(scores, 2)?;
    let out = g.matmul_batched(a, rows(v)?)?;
    g.reshape(out, &[b, c, n])
}

#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub qkv: Conv2d,
    pub tau: ParamId,
    pub proj: Conv2d,
    pub heads: usize,
    pub channels: usize,
}

impl ChannelAttention {
    pub fn new(b: &mut Builder, name: &str, channels: usize, heads: usize) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::invalid(format!("{channels} channels do not split into {heads} heads")));
        }
        let mut s = b.scope(name);
        Ok(Self {
            qkv: Conv2d::new(&mut s, "qkv", channels, 3 * channels, 1, 1, 1, false)?,
            tau: s.constant("tau", &[heads], 1.0)?,
            proj: Conv2d::new(&mut s, "proj", channels, channels, 1, 1, 1, false)?,
            heads,
            channels,
        })
    }

    /// Attention output before the projection, `[B,C,H,W]`.
    pub fn attend<T: Real>(&self, g: &Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let dims = g.dims(x);
        if dims.len() != 4 || dims[1] != self.channels {
            return Err(Error::shape("channel_attention", format!("expected {} channels, got {dims:?}", self.channels)));
        }
        let (b, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
        let qkv = self.qkv.forward(g, s, x)?;
        let qkv = g.reshape(qkv, &[b, 3 * c, h * w])?;
        let p = g.split(qkv, 1, &[c, c, c])?;
        let out = channel_attention_core(g, p[0], p[1], p[2], g.param(s, self.tau), self.heads)?;
        g.reshape(out, &[b, c, h, w])
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.attend(g, s, x)?;
        self.proj.forward(g, s, y)
    }
}

