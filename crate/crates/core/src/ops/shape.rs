//! Layout ops: reshape, permute, slice/concat and window tiling.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::reduce::split_axis;
use crate::tensor::{Real, Shape, Tensor};

fn permute_data<T: Real>(data: &[T], dims: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = dims.len();
    let in_strides = Shape::new(dims).map(|s| s.strides()).unwrap_or_default();
    let out_dims: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut counter = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..data.len() {
        out.push(data[off]);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            off += strides[ax];
            if counter[ax] < out_dims[ax] {
                break;
            }
            off -= strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    (out_dims, out)
}

/// For every element of the tiled output, the offset it reads in the source
/// image, or `None` where it falls in the zero border.
fn window_map(dims: &[usize], win: usize, halo: usize) -> Vec<Option<usize>> {
    let (b, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
    let (nh, nw) = (h.div_ceil(win), w.div_ceil(win));
    let span = win + 2 * halo;
    let mut map = Vec::with_capacity(b * nh * nw * c * span * span);
    for bi in 0..b {
        for wy in 0..nh {
            for wx in 0..nw {
                for ci in 0..c {
                    for i in 0..span {
                        let y = (wy * win + i) as isize - halo as isize;
                        for j in 0..span {
                            let x = (wx * win + j) as isize - halo as isize;
                            let inside = y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w;
                            map.push(inside.then(|| ((bi * c + ci) * h + y as usize) * w + x as usize));
                        }
                    }
                }
            }
        }
    }
    map
}

impl<T: Real> Graph<T> {
    pub fn reshape(&self, x: Var, dims: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let value = tx.reshape(dims)?;
        let in_shape = tx.shape().clone();
        self.push_op("reshape", &[x], value, move |g, _| {
            vec![Some(Tensor::from_parts(in_shape.clone(), g.to_vec()))]
        })
    }

    pub fn permute(&self, x: Var, perm: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let rank = tx.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid(format!("bad permutation {perm:?} for rank {rank}")));
        }
        let (out_dims, out) = permute_data(tx.data(), tx.dims(), perm);
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let value = Tensor::from_parts(Shape::new(&out_dims)?, out);
        let in_shape = tx.shape().clone();
        self.push_op("permute", &[x], value, move |g, _| {
            let (_, gx) = permute_data(g.data(), g.dims(), &inverse);
            vec![Some(Tensor::from_parts(in_shape.clone(), gx))]
        })
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() || len == 0 || start + len > tx.dims()[axis] {
            return Err(Error::shape("slice", format!("[{start}, {}) on axis {axis} of {:?}", start + len, tx.dims())));
        }
        let (outer, extent, inner) = split_axis(tx.dims(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            out.extend_from_slice(&tx.data()[base..base + len * inner]);
        }
        let mut out_dims = tx.dims().to_vec();
        out_dims[axis] = len;
        let value = Tensor::from_parts(Shape::new(&out_dims)?, out);
        let in_shape = tx.shape().clone();
        self.push_op("slice", &[x], value, move |g, _| {
            let mut gx = vec![T::zero(); in_shape.numel()];
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                gx[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::from_parts(in_shape.clone(), gx))]
        })
    }

    /// Splits `axis` into consecutive pieces of the given sizes.
    pub fn split(&self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let dims = self.dims(x);
        if axis >= dims.len() || sizes.iter().sum::<usize>() != dims[axis] {
            return Err(Error::shape("split", format!("sizes {sizes:?} do not cover axis {axis} of {dims:?}")));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&s| {
                let v = self.slice(x, axis, start, s);
                start += s;
                v
            })
            .collect()
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::invalid("concat of an empty list"));
        }
        let values: Vec<Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let ref_dims = values[0].dims().to_vec();
        if axis >= ref_dims.len() {
            return Err(Error::invalid(format!("concat axis {axis} out of range")));
        }
        for v in &values[1..] {
            let d = v.dims();
            let ok = d.len() == ref_dims.len() && d.iter().zip(&ref_dims).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", format!("{:?} vs {:?}", ref_dims, d)));
            }
        }
        let extents: Vec<usize> = values.iter().map(|v| v.dims()[axis]).collect();
        let total: usize = extents.iter().sum();
        let (outer, _, inner) = split_axis(&ref_dims, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &e) in values.iter().zip(&extents) {
                out.extend_from_slice(&v.data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut out_dims = ref_dims.clone();
        out_dims[axis] = total;
        let value = Tensor::from_parts(Shape::new(&out_dims)?, out);
        let shapes: Vec<Shape> = values.iter().map(|v| v.shape().clone()).collect();
        self.push_op("concat", xs, value, move |g, mask| {
            let g = g.data();
            let mut offset = 0;
            let mut grads = Vec::with_capacity(shapes.len());
            for ((s, &e), &needed) in shapes.iter().zip(&extents).zip(mask) {
                if needed {
                    let mut gx = Vec::with_capacity(outer * e * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gx.extend_from_slice(&g[base..base + e * inner]);
                    }
                    grads.push(Some(Tensor::from_parts(s.clone(), gx)));
                } else {
                    grads.push(None);
                }
                offset += e;
            }
            grads
        })
    }

    /// Tiles `[B,C,H,W]` into non-overlapping `win x win` windows, each grown
    /// by `halo` pixels on every side (zero outside the image). Output is
    /// `[B*nH*nW, C, win+2*halo, win+2*halo]`, windows in row-major order.
    /// Ragged edges are covered by windows that run past the border.
    pub fn extract_windows(&self, x: Var, win: usize, halo: usize) -> Result<Var> {
        let tx = self.value(x);
        let dims = tx.dims().to_vec();
        if dims.len() != 4 || win == 0 {
            return Err(Error::shape("extract_windows", format!("{dims:?} with window {win}")));
        }
        let map = Arc::new(window_map(&dims, win, halo));
        let data = tx.data();
        let out: Vec<T> = map.iter().map(|m| m.map_or(T::zero(), |o| data[o])).collect();
        let n_win = dims[0] * dims[2].div_ceil(win) * dims[3].div_ceil(win);
        let span = win + 2 * halo;
        let value = Tensor::from_parts(Shape::new(&[n_win, dims[1], span, span])?, out);
        let in_shape = tx.shape().clone();
        self.push_op("extract_windows", &[x], value, move |g, _| {
            let mut gx = vec![T::zero(); in_shape.numel()];
            for (&gi, m) in g.data().iter().zip(map.iter()) {
                if let Some(o) = *m {
                    gx[o] += gi;
                }
            }
            vec![Some(Tensor::from_parts(in_shape.clone(), gx))]
        })
    }

    /// Inverse of [`Graph::extract_windows`] with zero halo. Window pixels
    /// past the border are dropped.
    pub fn merge_windows(&self, x: Var, batch: usize, height: usize, width: usize) -> Result<Var> {
        let tx = self.value(x);
        let dims = tx.dims().to_vec();
        if dims.len() != 4 || dims[2] != dims[3] {
            return Err(Error::shape("merge_windows", format!("{dims:?} is not a stack of square windows")));
        }
        let win = dims[2];
        if dims[0] != batch * height.div_ceil(win) * width.div_ceil(win) {
            return Err(Error::shape("merge_windows", format!("{dims:?} does not tile {batch}x{height}x{width}")));
        }
        let image_dims = [batch, dims[1], height, width];
        let map = Arc::new(window_map(&image_dims, win, 0));
        let mut out = vec![T::zero(); batch * dims[1] * height * width];
        for (&v, m) in tx.data().iter().zip(map.iter()) {
            if let Some(o) = *m {
                out[o] = v;
            }
        }
        let value = Tensor::from_parts(Shape::new(&image_dims)?, out);
        let in_shape = tx.shape().clone();
        self.push_op("merge_windows", &[x], value, move |g, _| {
            let gd = g.data();
            let gx = map.iter().map(|m| m.map_or(T::zero(), |o| gd[o])).collect();
            vec![Some(Tensor::from_parts(in_shape.clone(), gx))]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iota(dims: &[usize]) -> Tensor<f64> {
        let n = dims.iter().product::<usize>();
        Tensor::from_vec(dims, (0..n).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn split_then_concat_is_exact() {
        let g = Graph::<f64>::new();
        let x = g.constant(iota(&[2, 5, 3]));
        let parts = g.split(x, 1, &[2, 3]).unwrap();
        let back = g.concat(&parts, 1).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());
        assert_eq!(g.dims(parts[1]), vec![2, 3, 3]);
    }

    #[test]
    fn concat_errors() {
        let g = Graph::<f64>::new();
        assert!(g.concat(&[], 0).is_err());
        let a = g.constant(iota(&[2, 3]));
        let b = g.constant(iota(&[3, 3]));
        assert!(g.concat(&[a, b], 1).is_err());
        assert!(g.concat(&[a, b], 0).is_ok());
    }

    #[test]
    fn permute_matches_manual_transpose() {
        let g = Graph::<f64>::new();
        let x = g.constant(iota(&[2, 3]));
        let y = g.value(g.permute(x, &[1, 0]).unwrap());
        assert_eq!(y.dims(), &[3, 2]);
        assert_eq!(y.data(), &[0., 3., 1., 4., 2., 5.]);
        assert!(g.permute(x, &[0, 0]).is_err());
    }

    #[test]
    fn windows_round_trip_and_halo_padding() {
        let g = Graph::<f64>::new();
        let x = g.constant(iota(&[1, 2, 4, 4]));
        let w = g.extract_windows(x, 2, 0).unwrap();
        assert_eq!(g.dims(w), vec![4, 2, 2, 2]);
        let back = g.merge_windows(w, 1, 4, 4).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());

        let h = g.value(g.extract_windows(x, 2, 1).unwrap());
        assert_eq!(h.dims(), &[4, 2, 4, 4]);
        // first window: top row and left column fall outside the image
        assert_eq!(h.at(&[0, 0, 0, 0]), 0.0);
        assert_eq!(h.at(&[0, 0, 0, 2]), 0.0);
        assert_eq!(h.at(&[0, 0, 2, 0]), 0.0);
        assert_eq!(h.at(&[0, 0, 2, 2]), 5.0);
        assert_eq!(h.at(&[0, 0, 1, 2]), 1.0);
        assert_eq!(h.at(&[0, 0, 3, 3]), 10.0);

        // ragged: a 3x3 grid over 4x4 runs past the border and merges back
        let r = g.extract_windows(x, 3, 0).unwrap();
        assert_eq!(g.dims(r), vec![4, 2, 3, 3]);
        assert_eq!(g.value(r).at(&[3, 0, 1, 1]), 0.0);
        assert_eq!(g.value(g.merge_windows(r, 1, 4, 4).unwrap()).data(), g.value(x).data());
        assert!(g.extract_windows(x, 0, 0).is_err());
    }
}
