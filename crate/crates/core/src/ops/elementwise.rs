//! Pointwise unary and broadcasting binary ops.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Unary<T> {
    Neg,
    Abs,
    Exp,
    Log,
    Relu,
    Sigmoid,
    Sqrt,
    Square,
    Clamp(T, T),
    Scale(T),
    Shift(T),
}

/// Numpy-style right-aligned broadcast of two shapes.
pub(crate) fn broadcast_dims(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every element of `out` (row-major), the offset of the element of `src`
/// it reads under broadcasting.
pub(crate) fn broadcast_offsets(out: &[usize], src: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let pad = rank - src.len();
    let mut src_strides = vec![0usize; rank];
    let mut stride = 1;
    for i in (0..src.len()).rev() {
        if src[i] != 1 {
            src_strides[i + pad] = stride;
        }
        stride *= src[i];
    }
    let n: usize = out.iter().product();
    let mut offsets = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        offsets.push(off);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            off += src_strides[ax];
            if counter[ax] < out[ax] {
                break;
            }
            off -= src_strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    offsets
}

/// Reduces a broadcast gradient back onto the source layout, in a fixed order.
fn sum_to<T: Real>(full: &[T], offsets: Option<&[usize]>, src_len: usize) -> Vec<T> {
    match offsets {
        None => full.to_vec(),
        Some(offsets) => {
            let mut acc = vec![T::zero(); src_len];
            for (&g, &o) in full.iter().zip(offsets) {
                acc[o] += g;
            }
            acc
        }
    }
}

impl<T: Real> Unary<T> {
    fn forward(self, x: T) -> T {
        match self {
            Unary::Neg => -x,
            Unary::Abs => x.abs(),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Relu => x.max(T::zero()),
            Unary::Sigmoid => sigmoid(x),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::Clamp(lo, hi) => x.max(lo).min(hi),
            Unary::Scale(s) => x * s,
            Unary::Shift(s) => x + s,
        }
    }

    /// dy/dx given input and output.
    fn derivative(self, x: T, y: T) -> T {
        let one = T::one();
        let zero = T::zero();
        match self {
            Unary::Neg => -one,
            // zero subgradient at exactly 0
            Unary::Abs => {
                if x > zero {
                    one
                } else if x < zero {
                    -one
                } else {
                    zero
                }
            }
            Unary::Exp => y,
            Unary::Log => one / x,
            Unary::Relu => {
                if x > zero {
                    one
                } else {
                    zero
                }
            }
            Unary::Sigmoid => y * (one - y),
            Unary::Sqrt => T::lit(0.5) / y,
            Unary::Square => T::lit(2.0) * x,
            Unary::Clamp(lo, hi) => {
                if x >= lo && x <= hi {
                    one
                } else {
                    zero
                }
            }
            Unary::Scale(s) => s,
            Unary::Shift(_) => one,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Unary::Neg => "neg",
            Unary::Abs => "abs",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Relu => "relu",
            Unary::Sigmoid => "sigmoid",
            Unary::Sqrt => "sqrt",
            Unary::Square => "square",
            Unary::Clamp(..) => "clamp",
            Unary::Scale(_) => "scale",
            Unary::Shift(_) => "shift",
        }
    }
}

/// Logistic function, evaluated without overflow for large |x|.
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Graph<T> {
    fn binary(&self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let ta = self.value(a);
        let tb = self.value(b);
        let name = match op {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let (out_dims, ia, ib) = if ta.dims() == tb.dims() {
            (ta.dims().to_vec(), None, None)
        } else {
            let out = broadcast_dims(ta.dims(), tb.dims()).ok_or_else(|| {
                Error::shape(name, format!("{:?} vs {:?} do not broadcast", ta.dims(), tb.dims()))
            })?;
            let ia = (ta.dims() != out.as_slice()).then(|| broadcast_offsets(&out, ta.dims()));
            let ib = (tb.dims() != out.as_slice()).then(|| broadcast_offsets(&out, tb.dims()));
            (out, ia, ib)
        };
        let n: usize = out_dims.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let at = |i: usize| ia.as_ref().map_or(i, |v| v[i]);
        let bt = |i: usize| ib.as_ref().map_or(i, |v| v[i]);
        let f = |x: T, y: T| match op {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let out: Vec<T> = match (&ia, &ib) {
            (None, None) => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..n).map(|i| f(da[at(i)], db[bt(i)])).collect(),
        };
        let value = Tensor::from_parts(Shape::new(&out_dims)?, out);
        self.push_op(name, &[a, b], value, move |g, mask| {
            let g = g.data();
            let at = |i: usize| ia.as_ref().map_or(i, |v| v[i]);
            let bt = |i: usize| ib.as_ref().map_or(i, |v| v[i]);
            let (da, db) = (ta.data(), tb.data());
            let ga = mask[0].then(|| {
                let full: Vec<T> = match op {
                    Binary::Add | Binary::Sub => g.to_vec(),
                    Binary::Mul => g.iter().enumerate().map(|(i, &gi)| gi * db[bt(i)]).collect(),
                    Binary::Div => g.iter().enumerate().map(|(i, &gi)| gi / db[bt(i)]).collect(),
                };
                Tensor::from_parts(ta.shape().clone(), sum_to(&full, ia.as_deref(), ta.numel()))
            });
            let gb = mask[1].then(|| {
                let full: Vec<T> = match op {
                    Binary::Add => g.to_vec(),
                    Binary::Sub => g.iter().map(|&gi| -gi).collect(),
                    Binary::Mul => g.iter().enumerate().map(|(i, &gi)| gi * da[at(i)]).collect(),
                    Binary::Div => g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| {
                            let y = db[bt(i)];
                            -gi * da[at(i)] / (y * y)
                        })
                        .collect(),
                };
                Tensor::from_parts(tb.shape().clone(), sum_to(&full, ib.as_deref(), tb.numel()))
            });
            vec![ga, gb]
        })
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&self, op: Unary<T>, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if op == Unary::Log && tx.data().iter().any(|&v| v <= T::zero()) {
            return Err(Error::invalid("log of a non-positive value"));
        }
        let value = tx.map(|v| op.forward(v));
        let ty = value.clone();
        self.push_op(op.name(), &[x], value, move |g, _| {
            let gx: Vec<T> = g
                .data()
                .iter()
                .zip(tx.data().iter().zip(ty.data()))
                .map(|(&gi, (&xi, &yi))| gi * op.derivative(xi, yi))
                .collect();
            vec![Some(Tensor::from_parts(tx.shape().clone(), gx))]
        })
    }

    pub fn neg(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Neg, x)
    }

    pub fn abs(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Abs, x)
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    /// Natural log; fails on non-positive input.
    pub fn log(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn sqrt(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, x)
    }

    pub fn square(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Square, x)
    }

    pub fn clamp(&self, x: Var, lo: T, hi: T) -> Result<Var> {
        if lo > hi {
            return Err(Error::invalid("clamp bounds reversed"));
        }
        self.unary(Unary::Clamp(lo, hi), x)
    }

    pub fn scale(&self, x: Var, s: T) -> Result<Var> {
        self.unary(Unary::Scale(s), x)
    }

    pub fn shift(&self, x: Var, s: T) -> Result<Var> {
        self.unary(Unary::Shift(s), x)
    }

    /// Inverse sigmoid with the probability clamped to `[eps, 1 - eps]`.
    pub fn logit(&self, p: Var, eps: T) -> Result<Var> {
        let pc = self.clamp(p, eps, T::one() - eps)?;
        let q = self.shift(self.neg(pc)?, T::one())?;
        let lp = self.log(pc)?;
        let lq = self.log(q)?;
        self.sub(lp, lq)
    }
}
