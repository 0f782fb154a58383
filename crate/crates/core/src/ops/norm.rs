use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::reduce::split_axis;
use crate::tensor::{Real, Shape, Tensor};

pub const RMSNORM_EPS: f64 = 1e-6;
pub const GROUPNORM_EPS: f64 = 1e-5;

impl<T: Real> Graph<T> {
    /// `gain ⊙ x / sqrt(mean(x², axis) + eps)`, `gain` of shape `[dims[axis]]`.
    pub fn rmsnorm(&self, x: Var, gain: Var, axis: usize, eps: T) -> Result<Var> {
        let tx = self.value(x);
        let tg = self.value(gain);
        if axis >= tx.rank() {
            return Err(Error::invalid(format!("rmsnorm axis {axis} out of range")));
        }
        if tg.dims() != [tx.dims()[axis]] {
            return Err(Error::shape("rmsnorm", format!("gain {:?} for axis extent {}", tg.dims(), tx.dims()[axis])));
        }
        if eps <= T::zero() {
            return Err(Error::invalid("rmsnorm eps must be positive"));
        }
        let (outer, n, inner) = split_axis(tx.dims(), axis);
        let nt = T::from_usize(n).unwrap();
        let (xd, gd) = (tx.data(), tg.data());
        let mut inv_rms = vec![T::zero(); outer * inner];
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut ss = T::zero();
                for j in 0..n {
                    let v = xd[base + j * inner];
                    ss += v * v;
                }
                let r = T::one() / (ss / nt + eps).sqrt();
                inv_rms[o * inner + i] = r;
                for j in 0..n {
                    out[base + j * inner] = gd[j] * xd[base + j * inner] * r;
                }
            }
        }
        let value = Tensor::from_parts(tx.shape().clone(), out);
        self.push_op("rmsnorm", &[x, gain], value, move |g, mask| {
            let (gy, xd, gd) = (g.data(), tx.data(), tg.data());
            let mut dx = vec![T::zero(); if mask[0] { xd.len() } else { 0 }];
            let mut dg = vec![T::zero(); n];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let r = inv_rms[o * inner + i];
                    let mut dot = T::zero();
                    for j in 0..n {
                        let k = base + j * inner;
                        dot += gy[k] * gd[j] * xd[k];
                        dg[j] += gy[k] * xd[k] * r;
                    }
                    if mask[0] {
                        let c = dot * r * r * r / nt;
                        for j in 0..n {
                            let k = base + j * inner;
                            dx[k] = gy[k] * gd[j] * r - xd[k] * c;
                        }
                    }
                }
            }
            vec![
                mask[0].then(|| Tensor::from_parts(tx.shape().clone(), dx)),
                mask[1].then(|| Tensor::from_parts(tg.shape().clone(), dg)),
            ]
        })
    }

    /// Group normalization of `[B,C,H,W]` with per-channel affine `[C]`.
    pub fn group_norm(&self, x: Var, gamma: Var, beta: Var, groups: usize, eps: T) -> Result<Var> {
        let tx = self.value(x);
        let (tga, tbe) = (self.value(gamma), self.value(beta));
        let d = tx.dims().to_vec();
        if d.len() != 4 || groups == 0 || d[1] % groups != 0 {
            return Err(Error::shape("group_norm", format!("{d:?} with {groups} groups")));
        }
        if tga.dims() != [d[1]] || tbe.dims() != [d[1]] {
            return Err(Error::shape("group_norm", "affine parameters must be [C]"));
        }
        let (b, c, hw) = (d[0], d[1], d[2] * d[3]);
        let cg = c / groups;
        let m = cg * hw;
        let mt = T::from_usize(m).unwrap();
        let xd = tx.data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); b * groups];
        for bi in 0..b {
            for gi in 0..groups {
                let base = (bi * c + gi * cg) * hw;
                let seg = &xd[base..base + m];
                let mean = seg.iter().copied().sum::<T>() / mt;
                let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mt;
                let s = T::one() / (var + eps).sqrt();
                inv_std[bi * groups + gi] = s;
                for (h, &v) in xhat[base..base + m].iter_mut().zip(seg) {
                    *h = (v - mean) * s;
                }
            }
        }
        let (ga, be) = (tga.data(), tbe.data());
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * hw;
                for k in off..off + hw {
                    out[k] = ga[ci] * xhat[k] + be[ci];
                }
            }
        }
        let value = Tensor::from_parts(Shape::new(&d)?, out);
        self.push_op("group_norm", &[x, gamma, beta], value, move |g, mask| {
            let gy = g.data();
            let ga = tga.data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for bi in 0..b {
                for ci in 0..c {
                    let off = (bi * c + ci) * hw;
                    for k in off..off + hw {
                        dgamma[ci] += gy[k] * xhat[k];
                        dbeta[ci] += gy[k];
                    }
                }
            }
            let dx = mask[0].then(|| {
                let mut dx = vec![T::zero(); gy.len()];
                for bi in 0..b {
                    for gi in 0..groups {
                        let base = (bi * c + gi * cg) * hw;
                        let mut mean_gh = T::zero();
                        let mut mean_ghx = T::zero();
                        for k in 0..m {
                            let gh = gy[base + k] * ga[gi * cg + k / hw];
                            mean_gh += gh;
                            mean_ghx += gh * xhat[base + k];
                        }
                        mean_gh = mean_gh / mt;
                        mean_ghx = mean_ghx / mt;
                        let s = inv_std[bi * groups + gi];
                        for k in 0..m {
                            let gh = gy[base + k] * ga[gi * cg + k / hw];
                            dx[base + k] = s * (gh - mean_gh - xhat[base + k] * mean_ghx);
                        }
                    }
                }
                Tensor::from_parts(tx.shape().clone(), dx)
            });
            vec![
                dx,
                mask[1].then(|| Tensor::from_parts(tga.shape().clone(), dgamma)),
                mask[2].then(|| Tensor::from_parts(tbe.shape().clone(), dbeta)),
            ]
        })
    }
}
