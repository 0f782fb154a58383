//! Grouped 2-D convolution with zero padding (im2col + GEMM; direct loops for
//! depthwise kernels).

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn ncol(&self) -> usize {
        self.cin_g() * self.k * self.k
    }
    fn npix(&self) -> usize {
        self.ho * self.wo
    }
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
    fn is_depthwise(&self) -> bool {
        self.cin_g() == 1 && self.cout_g() == 1
    }
    /// Input coordinate for output index `o` and kernel tap `t`.
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let i = (o * self.stride + t) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < extent).then_some(i as usize)
    }
    /// Output indices `lo..hi` whose tap `t` lands inside `0..extent`.
    fn valid(&self, t: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > t { (self.pad - t).div_ceil(s).min(out_extent) } else { 0 };
        let hi = if extent + self.pad > t { (extent + self.pad - t).div_ceil(s).min(out_extent) } else { 0 };
        (lo, hi.max(lo))
    }
}

/// Column-buffer budget in elements; batches are processed in chunks that fit.
const COLS_BUDGET: usize = 1 << 22;

/// `x` holds `cin_g` channels of one image. Fills its `npix` columns at
/// offset `off` of the `[ncol, ld]` column matrix.
fn im2col<T: Real>(x: &[T], g: &Geometry, cols: &mut [T], ld: usize, off: usize) {
    let (k, npix) = (g.k, g.npix());
    for c in 0..g.cin_g() {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        if g.is_pointwise() {
            cols[c * ld + off..][..npix].copy_from_slice(plane);
            continue;
        }
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((c * k + ki) * k + kj) * ld + off..][..npix];
                for oy in 0..g.ho {
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    match g.src(oy, ki, g.h) {
                        None => dst.fill(T::zero()),
                        Some(iy) => {
                            let src = &plane[iy * g.w..(iy + 1) * g.w];
                            let (lo, hi) = g.valid(kj, g.w, g.wo);
                            dst[..lo].fill(T::zero());
                            dst[hi..].fill(T::zero());
                            if lo == hi {
                                continue;
                            }
                            let shift = lo * g.stride + kj - g.pad;
                            if g.stride == 1 {
                                dst[lo..hi].copy_from_slice(&src[shift..shift + hi - lo]);
                            } else {
                                for (i, d) in dst[lo..hi].iter_mut().enumerate() {
                                    *d = src[shift + i * g.stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`].
fn col2im<T: Real>(cols: &[T], g: &Geometry, dx: &mut [T], ld: usize, off: usize) {
    let (k, npix) = (g.k, g.npix());
    for c in 0..g.cin_g() {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((c * k + ki) * k + kj) * ld + off..][..npix];
                for oy in 0..g.ho {
                    let Some(iy) = g.src(oy, ki, g.h) else { continue };
                    let (lo, hi) = g.valid(kj, g.w, g.wo);
                    if lo == hi {
                        continue;
                    }
                    let shift = lo * g.stride + kj - g.pad;
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for (i, &v) in row[oy * g.wo + lo..oy * g.wo + hi].iter().enumerate() {
                        dst[shift + i * g.stride] += v;
                    }
                }
            }
        }
    }
}

/// Images per GEMM so that the column buffer stays within budget.
fn chunk(g: &Geometry) -> usize {
    (COLS_BUDGET / (g.ncol() * g.npix()).max(1)).clamp(1, g.batch)
}

fn depthwise_forward<T: Real>(g: &Geometry, x: &[T], w: &[T], out: &mut [T]) {
    let (k, npix) = (g.k, g.npix());
    for b in 0..g.batch {
        for c in 0..g.cin {
            let plane = &x[(b * g.cin + c) * g.h * g.w..][..g.h * g.w];
            let ker = &w[c * k * k..(c + 1) * k * k];
            let dst = &mut out[(b * g.cout + c) * npix..][..npix];
            for oy in 0..g.ho {
                for ki in 0..k {
                    let Some(iy) = g.src(oy, ki, g.h) else { continue };
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    for kj in 0..k {
                        let wv = ker[ki * k + kj];
                        let (lo, hi) = g.valid(kj, g.w, g.wo);
                        if lo == hi {
                            continue;
                        }
                        let shift = lo * g.stride + kj - g.pad;
                        let d = &mut dst[oy * g.wo + lo..oy * g.wo + hi];
                        if g.stride == 1 {
                            for (o, &v) in d.iter_mut().zip(&src[shift..shift + hi - lo]) {
                                *o += wv * v;
                            }
                        } else {
                            for (i, o) in d.iter_mut().enumerate() {
                                *o += wv * src[shift + i * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn forward<T: Real>(g: &Geometry, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (npix, ncol, cin_g, cout_g) = (g.npix(), g.ncol(), g.cin_g(), g.cout_g());
    let mut out = vec![T::zero(); g.batch * g.cout * npix];
    if g.is_depthwise() {
        depthwise_forward(g, x, w, &mut out);
    } else {
        let nb = chunk(g);
        let mut cols = vec![T::zero(); ncol * nb * npix];
        let mut tmp = vec![T::zero(); cout_g * nb * npix];
        for b0 in (0..g.batch).step_by(nb) {
            let n = nb.min(g.batch - b0);
            let ld = n * npix;
            for grp in 0..g.groups {
                for bi in 0..n {
                    let xg = &x[((b0 + bi) * g.cin + grp * cin_g) * g.h * g.w..][..cin_g * g.h * g.w];
                    im2col(xg, g, &mut cols, ld, bi * npix);
                }
                let wg = &w[grp * cout_g * ncol..(grp + 1) * cout_g * ncol];
                T::gemm(cout_g, ncol, ld, T::one(), wg, (ncol as isize, 1), &cols, (ld as isize, 1), T::zero(), &mut tmp, ld as isize);
                for bi in 0..n {
                    for co in 0..cout_g {
                        out[((b0 + bi) * g.cout + grp * cout_g + co) * npix..][..npix]
                            .copy_from_slice(&tmp[co * ld + bi * npix..][..npix]);
                    }
                }
            }
        }
    }
    if let Some(bias) = bias {
        for b in 0..g.batch {
            for (c, &bv) in bias.iter().enumerate() {
                out[(b * g.cout + c) * npix..][..npix].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

fn depthwise_backward<T: Real>(g: &Geometry, x: &[T], w: &[T], grad: &[T], dx: &mut [T], dw: &mut [T], need_x: bool, need_w: bool) {
    let (k, npix) = (g.k, g.npix());
    for b in 0..g.batch {
        for c in 0..g.cin {
            let base = (b * g.cin + c) * g.h * g.w;
            let gp = &grad[(b * g.cout + c) * npix..][..npix];
            for oy in 0..g.ho {
                for ki in 0..k {
                    let Some(iy) = g.src(oy, ki, g.h) else { continue };
                    let row = base + iy * g.w;
                    for kj in 0..k {
                        let wi = c * k * k + ki * k + kj;
                        let (lo, hi) = g.valid(kj, g.w, g.wo);
                        if lo == hi {
                            continue;
                        }
                        let shift = row + lo * g.stride + kj - g.pad;
                        let go = &gp[oy * g.wo + lo..oy * g.wo + hi];
                        if need_w {
                            let mut acc = T::zero();
                            for (i, &gv) in go.iter().enumerate() {
                                acc += gv * x[shift + i * g.stride];
                            }
                            dw[wi] += acc;
                        }
                        if need_x {
                            let wv = w[wi];
                            for (i, &gv) in go.iter().enumerate() {
                                dx[shift + i * g.stride] += gv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Returns (dx, dw) as requested.
fn backward<T: Real>(g: &Geometry, x: &[T], w: &[T], grad: &[T], need_x: bool, need_w: bool) -> (Vec<T>, Vec<T>) {
    let (npix, ncol, cin_g, cout_g) = (g.npix(), g.ncol(), g.cin_g(), g.cout_g());
    let mut dx = if need_x { vec![T::zero(); x.len()] } else { Vec::new() };
    let mut dw = if need_w { vec![T::zero(); w.len()] } else { Vec::new() };
    if g.is_depthwise() {
        depthwise_backward(g, x, w, grad, &mut dx, &mut dw, need_x, need_w);
        return (dx, dw);
    }
    let nb = chunk(g);
    let mut cols = vec![T::zero(); if need_w { ncol * nb * npix } else { 0 }];
    let mut dcols = vec![T::zero(); if need_x { ncol * nb * npix } else { 0 }];
    let mut gtmp = vec![T::zero(); cout_g * nb * npix];
    for b0 in (0..g.batch).step_by(nb) {
        let n = nb.min(g.batch - b0);
        let ld = n * npix;
        for grp in 0..g.groups {
            for bi in 0..n {
                for co in 0..cout_g {
                    gtmp[co * ld + bi * npix..][..npix].copy_from_slice(&grad[((b0 + bi) * g.cout + grp * cout_g + co) * npix..][..npix]);
                }
            }
            let wg = &w[grp * cout_g * ncol..(grp + 1) * cout_g * ncol];
            if need_w {
                for bi in 0..n {
                    let xg = &x[((b0 + bi) * g.cin + grp * cin_g) * g.h * g.w..][..cin_g * g.h * g.w];
                    im2col(xg, g, &mut cols, ld, bi * npix);
                }
                let dwg = &mut dw[grp * cout_g * ncol..(grp + 1) * cout_g * ncol];
                // dW += G * cols^T
                T::gemm(cout_g, ld, ncol, T::one(), &gtmp, (ld as isize, 1), &cols, (1, ld as isize), T::one(), dwg, ncol as isize);
            }
            if need_x {
                // dcols = W^T * G
                T::gemm(ncol, cout_g, ld, T::one(), wg, (1, ncol as isize), &gtmp, (ld as isize, 1), T::zero(), &mut dcols, ld as isize);
                for bi in 0..n {
                    let xoff = ((b0 + bi) * g.cin + grp * cin_g) * g.h * g.w;
                    col2im(&dcols, g, &mut dx[xoff..][..cin_g * g.h * g.w], ld, bi * npix);
                }
            }
        }
    }
    (dx, dw)
}

impl<T: Real> Graph<T> {
    /// `x: [B,Cin,H,W]`, `w: [Cout,Cin/groups,k,k]` with odd `k`, optional
    /// `bias: [Cout]`. Zero padding.
    pub fn conv2d(&self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize, groups: usize) -> Result<Var> {
        let tx = self.value(x);
        let tw = self.value(w);
        let tb = bias.map(|b| self.value(b));
        let (xd, wd) = (tx.dims(), tw.dims());
        if xd.len() != 4 || wd.len() != 4 {
            return Err(Error::shape("conv2d", format!("x {xd:?}, w {wd:?}: both must be rank 4")));
        }
        let (batch, cin, h, w_) = (xd[0], xd[1], xd[2], xd[3]);
        let (cout, cin_g, k, k2) = (wd[0], wd[1], wd[2], wd[3]);
        if groups == 0 || stride == 0 || cin % groups != 0 || cout % groups != 0 || cin_g != cin / groups {
            return Err(Error::shape("conv2d", format!("x {xd:?}, w {wd:?}, groups {groups}, stride {stride}")));
        }
        if k != k2 || k % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel must be square with odd size, got {k}x{k2}")));
        }
        if let Some(tb) = &tb {
            if tb.dims() != [cout] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {cout} output channels", tb.dims())));
            }
        }
        if h + 2 * pad < k || w_ + 2 * pad < k {
            return Err(Error::shape("conv2d", "non-positive output extent"));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w_ + 2 * pad - k) / stride + 1;
        let geo = Geometry { batch, cin, h, w: w_, cout, k, stride, pad, groups, ho, wo };
        let out = forward(&geo, tx.data(), tw.data(), tb.as_ref().map(|b| b.data()));
        let value = Tensor::from_parts(Shape::new(&[batch, cout, ho, wo])?, out);
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push_op("conv2d", &inputs, value, move |g, mask| {
            let gd = g.data();
            let (dx, dw) = backward(&geo, tx.data(), tw.data(), gd, mask[0], mask[1]);
            let mut grads = vec![
                mask[0].then(|| Tensor::from_parts(tx.shape().clone(), dx)),
                mask[1].then(|| Tensor::from_parts(tw.shape().clone(), dw)),
            ];
            if mask.len() == 3 {
                grads.push(mask[2].then(|| {
                    let npix = geo.npix();
                    let mut db = vec![T::zero(); geo.cout];
                    for b in 0..geo.batch {
                        for (c, d) in db.iter_mut().enumerate() {
                            for &v in &gd[(b * geo.cout + c) * npix..][..npix] {
                                *d += v;
                            }
                        }
                    }
                    Tensor::from_parts(Shape::new(&[geo.cout]).unwrap(), db)
                }));
            }
            grads
        })
    }
}
