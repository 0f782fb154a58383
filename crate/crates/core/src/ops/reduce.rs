//! Sum/mean/max reductions and softmax.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

/// Splits `dims` around `axis` into (outer, extent, inner) element counts.
pub(crate) fn split_axis(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

impl<T: Real> Graph<T> {
    /// Reduces over `axes`. With `keepdim` the reduced extents stay as 1,
    /// otherwise they are removed. Max routes its gradient to the first
    /// maximal element in row-major order.
    pub fn reduce(&self, x: Var, axes: &[usize], mode: Reduce, keepdim: bool) -> Result<Var> {
        let tx = self.value(x);
        let dims = tx.dims().to_vec();
        if axes.is_empty() {
            return Err(Error::invalid("empty reduction"));
        }
        let mut reduced = vec![false; dims.len()];
        for &a in axes {
            if a >= dims.len() || reduced[a] {
                return Err(Error::invalid(format!("bad reduction axes {axes:?} for rank {}", dims.len())));
            }
            reduced[a] = true;
        }
        let kept: Vec<usize> = dims.iter().zip(&reduced).map(|(&d, &r)| if r { 1 } else { d }).collect();
        let out_dims: Vec<usize> = if keepdim {
            kept.clone()
        } else {
            dims.iter().zip(&reduced).filter(|(_, &r)| !r).map(|(&d, _)| d).collect()
        };
        let out_n: usize = kept.iter().product();
        let count = tx.numel() / out_n;
        // out offset for every input element
        let index = super::elementwise::broadcast_offsets(&dims, &kept);
        let data = tx.data();
        let mut out = vec![if mode == Reduce::Max { T::neg_infinity() } else { T::zero() }; out_n];
        let mut argmax = if mode == Reduce::Max { vec![usize::MAX; out_n] } else { Vec::new() };
        for (i, (&v, &o)) in data.iter().zip(&index).enumerate() {
            match mode {
                Reduce::Sum | Reduce::Mean => out[o] += v,
                Reduce::Max => {
                    if argmax[o] == usize::MAX || v > out[o] {
                        out[o] = v;
                        argmax[o] = i;
                    }
                }
            }
        }
        if mode == Reduce::Mean {
            let c = T::from_usize(count).unwrap();
            out.iter_mut().for_each(|v| *v = *v / c);
        }
        let value = Tensor::from_parts(Shape::new(&out_dims)?, out);
        let in_shape = tx.shape().clone();
        self.push_op("reduce", &[x], value, move |g, _| {
            let g = g.data();
            let gx: Vec<T> = match mode {
                Reduce::Sum => index.iter().map(|&o| g[o]).collect(),
                Reduce::Mean => {
                    let c = T::from_usize(count).unwrap();
                    index.iter().map(|&o| g[o] / c).collect()
                }
                Reduce::Max => {
                    let mut gx = vec![T::zero(); index.len()];
                    for (o, &i) in argmax.iter().enumerate() {
                        gx[i] += g[o];
                    }
                    gx
                }
            };
            vec![Some(Tensor::from_parts(in_shape.clone(), gx))]
        })
    }

    pub fn sum_all(&self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.dims(x).len()).collect();
        if axes.is_empty() {
            return Ok(x);
        }
        self.reduce(x, &axes, Reduce::Sum, false)
    }

    pub fn mean_all(&self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.dims(x).len()).collect();
        if axes.is_empty() {
            return Ok(x);
        }
        self.reduce(x, &axes, Reduce::Mean, false)
    }

    /// Softmax along `axis`, stabilized by subtracting the running max.
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() {
            return Err(Error::invalid(format!("softmax axis {axis} out of range")));
        }
        let (outer, len, inner) = split_axis(tx.dims(), axis);
        let data = tx.data();
        let mut out = vec![T::zero(); data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut m = T::neg_infinity();
                for j in 0..len {
                    m = m.max(data[base + j * inner]);
                }
                let mut s = T::zero();
                for j in 0..len {
                    let e = (data[base + j * inner] - m).exp();
                    out[base + j * inner] = e;
                    s += e;
                }
                for j in 0..len {
                    out[base + j * inner] = out[base + j * inner] / s;
                }
            }
        }
        let value = Tensor::from_parts(tx.shape().clone(), out);
        let ty = value.clone();
        self.push_op("softmax", &[x], value, move |g, _| {
            let (g, y) = (g.data(), ty.data());
            let mut gx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut dot = T::zero();
                    for j in 0..len {
                        dot += g[base + j * inner] * y[base + j * inner];
                    }
                    for j in 0..len {
                        let k = base + j * inner;
                        gx[k] = y[k] * (g[k] - dot);
                    }
                }
            }
            vec![Some(Tensor::from_parts(ty.shape().clone(), gx))]
        })
    }
}
