use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Shape, Tensor};

/// Strided view of one logical `[rows, cols]` matrix per batch entry.
#[derive(Clone, Copy)]
struct View {
    batch: usize,
    rs: isize,
    cs: isize,
}

impl View {
    fn t(self) -> Self {
        Self { batch: self.batch, rs: self.cs, cs: self.rs }
    }
}

fn bmm<T: Real>(h: usize, m: usize, k: usize, n: usize, a: &[T], av: View, b: &[T], bv: View) -> Vec<T> {
    let mut out = vec![T::zero(); h * m * n];
    for i in 0..h {
        let c = &mut out[i * m * n..(i + 1) * m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &a[i * av.batch..],
            (av.rs, av.cs),
            &b[i * bv.batch..],
            (bv.rs, bv.cs),
            T::zero(),
            c,
            n as isize,
        );
    }
    out
}

impl<T: Real> Graph<T> {
    /// `[h,N,d] x [h,d,M] -> [h,N,M]`.
    pub fn matmul_batched(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false)
    }

    /// `[h,N,d] x [h,M,d]^T -> [h,N,M]`.
    pub fn matmul_batched_nt(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, true)
    }

    /// Batched product with optional transposition of either operand's
    /// last two axes.
    pub fn matmul_ex(&self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let ta = self.value(a);
        let tb = self.value(b);
        if ta.rank() != 3 || tb.rank() != 3 {
            return Err(Error::shape("matmul", "operands must be rank 3"));
        }
        let (h, a1, a2) = (ta.dims()[0], ta.dims()[1], ta.dims()[2]);
        let (hb, b1, b2) = (tb.dims()[0], tb.dims()[1], tb.dims()[2]);
        let (m, k) = if trans_a { (a2, a1) } else { (a1, a2) };
        let (kb, n) = if trans_b { (b2, b1) } else { (b1, b2) };
        if h != hb || k != kb {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", ta.dims(), tb.dims())));
        }
        let av = if trans_a {
            View { batch: m * k, rs: 1, cs: m as isize }
        } else {
            View { batch: m * k, rs: k as isize, cs: 1 }
        };
        let bv = if trans_b {
            View { batch: k * n, rs: 1, cs: k as isize }
        } else {
            View { batch: k * n, rs: n as isize, cs: 1 }
        };
        let out = bmm(h, m, k, n, ta.data(), av, tb.data(), bv);
        let value = Tensor::from_parts(Shape::new(&[h, m, n])?, out);
        self.push_op("matmul", &[a, b], value, move |g, mask| {
            let gv = View { batch: m * n, rs: n as isize, cs: 1 };
            let ga = mask[0].then(|| {
                let d = if trans_a {
                    bmm(h, k, n, m, tb.data(), bv, g.data(), gv.t())
                } else {
                    bmm(h, m, n, k, g.data(), gv, tb.data(), bv.t())
                };
                Tensor::from_parts(ta.shape().clone(), d)
            });
            let gb = mask[1].then(|| {
                let d = if trans_b {
                    bmm(h, n, m, k, g.data(), gv.t(), ta.data(), av)
                } else {
                    bmm(h, k, m, n, ta.data(), av.t(), g.data(), gv)
                };
                Tensor::from_parts(tb.shape().clone(), d)
            });
            vec![ga, gb]
        })
    }
}
