//! Dense row-major tensors and the `CDT1` binary format.

use std::fmt;
use std::io::{Read, Write};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::path::Path;
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;
const CDT1_MAGIC: &[u8; 4] = b"CDT1";

/// Floating point element type. Implemented for `f32` (training) and `f64`
/// (gradient verification).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * op(a) * op(b) + beta * c` on strided row-major views.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_row_stride: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

fn check_gemm_bounds(len: usize, rows: usize, cols: usize, strides: (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * strides.0 + (cols as isize - 1) * strides.1;
    assert!(
        strides.0 >= 0 && strides.1 >= 0 && (last as usize) < len,
        "gemm operand out of bounds"
    );
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_row_stride: isize,
            ) {
                check_gemm_bounds(a.len(), m, k, a_strides);
                check_gemm_bounds(b.len(), k, n, b_strides);
                check_gemm_bounds(c.len(), m, n, (c_row_stride, 1));
                // SAFETY: every index touched by the kernel lies inside the
                // slices, as checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_row_stride,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Extents of a tensor, outermost first.
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.len() > MAX_RANK {
            return Err(Error::shape("tensor", format!("rank {} exceeds {MAX_RANK}", dims.len())));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero extent in {dims:?}")));
        }
        Ok(Self(dims.to_vec()))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.0.len()];
        for i in (0..self.0.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.0[i + 1];
        }
        strides
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0[axis]
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl From<&Shape> for Vec<usize> {
    fn from(s: &Shape) -> Self {
        s.0.clone()
    }
}

/// Immutable dense tensor. Cloning shares the underlying buffer. Equality
/// compares shape and elements.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Arc<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {dims:?} needs {} values, got {}", shape.numel(), data.len()),
            ));
        }
        Ok(Self { shape, data: Arc::new(data) })
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Self { shape, data: Arc::new(data) }
    }

    pub fn full(dims: &[usize], value: T) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let n = shape.numel();
        Ok(Self::from_parts(shape, vec![value; n]))
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::full(dims, T::zero())
    }

    pub fn ones(dims: &[usize]) -> Result<Self> {
        Self::full(dims, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(Shape::default(), vec![value])
    }

    pub fn from_f64(dims: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(dims, data.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn rank(&self) -> usize {
        self.shape.rank()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.as_ref().clone()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|d| d.as_ref().clone())
    }

    /// First element; the value of a scalar tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> T {
        let strides = self.shape.strides();
        let offset: usize = index.iter().zip(&strides).map(|(i, s)| i * s).sum();
        self.data[offset]
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {dims:?} changes element count", self.shape),
            ));
        }
        Ok(Self { shape, data: Arc::clone(&self.data) })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap()).collect(),
        )
    }

    /// Serializes in `CDT1` layout. Values are narrowed to 32-bit floats.
    pub fn write_cdt1<W: Write>(&self, mut w: W) -> Result<()> {
        let rank = self.rank();
        if !(1..=MAX_RANK).contains(&rank) {
            return Err(Error::format(format!("CDT1 requires rank 1..=4, got {rank}")));
        }
        let mut buf = Vec::with_capacity(5 + 4 * rank + 4 * self.numel());
        buf.extend_from_slice(CDT1_MAGIC);
        buf.push(rank as u8);
        for &d in self.dims() {
            let d = u32::try_from(d).map_err(|_| Error::format("extent exceeds u32"))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in self.data.iter() {
            buf.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_cdt1<R: Read>(mut r: R) -> Result<Self> {
        let mut head = [0u8; 5];
        r.read_exact(&mut head)?;
        if &head[..4] != CDT1_MAGIC {
            return Err(Error::format("bad CDT1 magic"));
        }
        let rank = head[4] as usize;
        if !(1..=MAX_RANK).contains(&rank) {
            return Err(Error::format(format!("CDT1 rank {rank} out of range")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            dims.push(u32::from_le_bytes(b) as usize);
        }
        let shape = Shape::new(&dims).map_err(|e| Error::format(e.to_string()))?;
        let mut payload = vec![0u8; 4 * shape.numel()];
        r.read_exact(&mut payload).map_err(|_| Error::format("CDT1 payload shorter than header extents"))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| T::from_f32(f32::from_le_bytes([c[0], c[1], c[2], c[3]])).unwrap())
            .collect();
        Ok(Self::from_parts(shape, data))
    }

    /// Reads a whole file, rejecting trailing bytes after the payload.
    pub fn load_cdt1(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        let mut cursor = bytes.as_slice();
        let t = Self::read_cdt1(&mut cursor)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        if !cursor.is_empty() {
            return Err(Error::format(format!(
                "{}: {} trailing bytes after CDT1 payload",
                path.display(),
                cursor.len()
            )));
        }
        Ok(t)
    }

    pub fn save_cdt1(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_cdt1(&mut buf)?;
        let path = path.as_ref();
        std::fs::write(path, buf).map_err(|e| Error::file(path, e))?;
        Ok(())
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        write!(f, "Tensor{:?} {:?}", self.shape, preview)?;
        if self.numel() > 8 {
            write!(f, "…")?;
        }
        Ok(())
    }
}
