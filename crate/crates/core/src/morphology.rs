//! Soft morphology with learnable structuring elements, and the refinement
//! stage that blends a morphologically cleaned map back into the logits.
//!
//! Soft erosion and dilation are softmax-weighted averages over the window,
//! so outputs stay inside the convex hull of the window values.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Builder;
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const TRAIN_TAU: f64 = 10.0;
pub const PROB_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MorphOp {
    Erode,
    Dilate,
}

impl MorphOp {
    fn sign<T: Real>(self) -> T {
        match self {
            MorphOp::Erode => -T::one(),
            MorphOp::Dilate => T::one(),
        }
    }
}

/// Per output pixel, the source offsets of its window under replicate
/// padding, in kernel row-major order.
fn window_offsets(h: usize, w: usize, k: usize) -> Vec<usize> {
    let r = (k / 2) as isize;
    let mut out = Vec::with_capacity(h * w * k * k);
    for y in 0..h as isize {
        for x in 0..w as isize {
            for dy in -r..=r {
                let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                for dx in -r..=r {
                    let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                    out.push(yy * w + xx);
                }
            }
        }
    }
    out
}

impl<T: Real> Graph<T> {
    /// Soft erosion or dilation of `[B,C,H,W]` by a shared `[k,k]` kernel.
    /// Window values are `m ∓ Ω` and are averaged with weights `exp(∓τ v)`.
    pub fn soft_morph(&self, m: Var, omega: Var, tau: T, op: MorphOp) -> Result<Var> {
        let tm = self.value(m);
        let to = self.value(omega);
        let dims = tm.dims().to_vec();
        let kd = to.dims().to_vec();
        if dims.len() != 4 {
            return Err(Error::shape("soft_morph", format!("expected [B,C,H,W], got {dims:?}")));
        }
        if kd.len() != 2 || kd[0] != kd[1] || kd[0] % 2 == 0 {
            return Err(Error::shape("soft_morph", format!("kernel must be odd and square, got {kd:?}")));
        }
        if tau <= T::zero() {
            return Err(Error::invalid("soft_morph temperature must be positive"));
        }
        let (h, w, k) = (dims[2], dims[3], kd[0]);
        let kk = k * k;
        let planes = dims[0] * dims[1];
        let offsets = window_offsets(h, w, k);
        let sign: T = op.sign();
        let beta = sign * tau;

        // Softmax weights and output per pixel; weights are kept for backward.
        let md = tm.data();
        let od = to.data();
        let mut out = vec![T::zero(); md.len()];
        let mut weights = vec![T::zero(); md.len() * kk];
        let mut vals = vec![T::zero(); kk];
        for p in 0..planes {
            let plane = &md[p * h * w..(p + 1) * h * w];
            for i in 0..h * w {
                let win = &offsets[i * kk..(i + 1) * kk];
                let mut top = T::neg_infinity();
                for u in 0..kk {
                    vals[u] = plane[win[u]] + sign * od[u];
                    top = top.max(beta * vals[u]);
                }
                let wrow = &mut weights[(p * h * w + i) * kk..(p * h * w + i + 1) * kk];
                let mut z = T::zero();
                for u in 0..kk {
                    wrow[u] = (beta * vals[u] - top).exp();
                    z += wrow[u];
                }
                let mut acc = T::zero();
                for u in 0..kk {
                    wrow[u] = wrow[u] / z;
                    acc += wrow[u] * vals[u];
                }
                out[p * h * w + i] = acc;
            }
        }
        let value = Tensor::from_vec(&dims, out.clone())?;
        let (m_shape, o_shape) = (tm.shape().clone(), to.shape().clone());
        self.push_op("soft_morph", &[m, omega], value, move |g, mask| {
            // d out / d v_u = p_u (1 + β (v_u − out)).
            let gd = g.data();
            let md = tm.data();
            let od = to.data();
            let mut gm = vec![T::zero(); md.len()];
            let mut go = vec![T::zero(); kk];
            for p in 0..planes {
                let base = p * h * w;
                for i in 0..h * w {
                    let gi = gd[base + i];
                    if gi == T::zero() {
                        continue;
                    }
                    let win = &offsets[i * kk..(i + 1) * kk];
                    let wrow = &weights[(base + i) * kk..(base + i + 1) * kk];
                    let o = out[base + i];
                    for u in 0..kk {
                        let v = md[base + win[u]] + sign * od[u];
                        let dv = gi * wrow[u] * (T::one() + beta * (v - o));
                        gm[base + win[u]] += dv;
                        go[u] += sign * dv;
                    }
                }
            }
            vec![
                mask[0].then(|| Tensor::from_parts(m_shape.clone(), gm)),
                mask[1].then(|| Tensor::from_parts(o_shape.clone(), go)),
            ]
        })
    }

    pub fn soft_erode(&self, m: Var, omega: Var, tau: T) -> Result<Var> {
        self.soft_morph(m, omega, tau, MorphOp::Erode)
    }

    pub fn soft_dilate(&self, m: Var, omega: Var, tau: T) -> Result<Var> {
        self.soft_morph(m, omega, tau, MorphOp::Dilate)
    }

    /// Erosion then dilation.
    pub fn opening(&self, m: Var, omega: Var, tau: T) -> Result<Var> {
        let e = self.soft_erode(m, omega, tau)?;
        self.soft_dilate(e, omega, tau)
    }

    /// Dilation then erosion.
    pub fn closing(&self, m: Var, omega: Var, tau: T) -> Result<Var> {
        let d = self.soft_dilate(m, omega, tau)?;
        self.soft_erode(d, omega, tau)
    }
}

/// Learnable refinement: `α σ⁻¹(Close(Open(σ(z), Ω1), Ω2)) + (1 − α) z`
/// with `α = σ(a)`.
#[derive(Debug, Clone)]
pub struct Lmm {
    pub omega1: ParamId,
    pub omega2: ParamId,
    pub mix: ParamId,
    pub tau: f64,
}

impl Lmm {
    pub fn new(b: &mut Builder, tau: f64) -> Result<Self> {
        if tau <= 0.0 {
            return Err(Error::invalid("morphology temperature must be positive"));
        }
        let mut s = b.scope("lmm");
        Ok(Self {
            omega1: s.constant("omega1", &[3, 3], 0.0)?,
            omega2: s.constant("omega2", &[5, 5], 0.0)?,
            mix: s.constant("mix", &[1], 0.0)?,
            tau,
        })
    }

    pub fn alpha<T: Real>(&self, g: &Graph<T>, s: &ParamStore<T>) -> Result<Var> {
        g.sigmoid(g.param(s, self.mix))
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, s: &ParamStore<T>, logits: Var) -> Result<Var> {
        let tau = T::lit(self.tau);
        let p = g.sigmoid(logits)?;
        let opened = g.opening(p, g.param(s, self.omega1), tau)?;
        let closed = g.closing(opened, g.param(s, self.omega2), tau)?;
        let refined = g.logit(closed, T::lit(PROB_EPS))?;
        let alpha = self.alpha(g, s)?;
        // α r + (1 − α) z = z + α (r − z)
        g.add(logits, g.mul(alpha, g.sub(refined, logits)?)?)
    }
}

/// 1 where the logit is strictly positive.
pub fn binarize<T: Real>(logits: &Tensor<T>) -> Vec<u8> {
    logits.data().iter().map(|&z| u8::from(z > T::zero())).collect()
}

/// Brute-force binary morphology on an `h x w` mask with a flat `k x k`
/// window and replicate borders.
pub mod hard {
    fn filter(mask: &[u8], h: usize, w: usize, k: usize, pick: fn(u8, u8) -> u8) -> Vec<u8> {
        let r = (k / 2) as isize;
        let mut out = vec![0u8; h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc: Option<u8> = None;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                        let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                        let v = mask[yy * w + xx];
                        acc = Some(acc.map_or(v, |a| pick(a, v)));
                    }
                }
                out[y as usize * w + x as usize] = acc.unwrap_or(0);
            }
        }
        out
    }

    pub fn erode(mask: &[u8], h: usize, w: usize, k: usize) -> Vec<u8> {
        filter(mask, h, w, k, u8::min)
    }

    pub fn dilate(mask: &[u8], h: usize, w: usize, k: usize) -> Vec<u8> {
        filter(mask, h, w, k, u8::max)
    }

    pub fn open(mask: &[u8], h: usize, w: usize, k: usize) -> Vec<u8> {
        dilate(&erode(mask, h, w, k), h, w, k)
    }

    pub fn close(mask: &[u8], h: usize, w: usize, k: usize) -> Vec<u8> {
        erode(&dilate(mask, h, w, k), h, w, k)
    }
}
