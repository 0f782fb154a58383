use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Shape, Tensor};

/// Source taps for one output axis: half-pixel centers, no corner alignment,
/// coordinates clamped to the valid range.
fn taps<T: Real>(src: usize, dst: usize) -> Vec<(usize, usize, T, T)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let frac = pos - i0 as f64;
            (i0, i1, T::lit(1.0 - frac), T::lit(frac))
        })
        .collect()
}

impl<T: Real> Graph<T> {
    /// Bilinear resize of `[B,C,H,W]` to `[B,C,out_h,out_w]`.
    pub fn bilinear_resize(&self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.dims().to_vec();
        if d.len() != 4 {
            return Err(Error::shape("bilinear_resize", format!("expected [B,C,H,W], got {d:?}")));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("resize target must be at least 1x1"));
        }
        if (d[2], d[3]) == (out_h, out_w) {
            return self.reshape(x, &d);
        }
        let (planes, h, w) = (d[0] * d[1], d[2], d[3]);
        let ty: Vec<(usize, usize, T, T)> = taps(h, out_h);
        let tx_: Vec<(usize, usize, T, T)> = taps(w, out_w);
        let src = tx.data();
        let mut out = Vec::with_capacity(planes * out_h * out_w);
        for p in 0..planes {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for &(y0, y1, wy0, wy1) in &ty {
                for &(x0, x1, wx0, wx1) in &tx_ {
                    out.push(
                        wy0 * (wx0 * plane[y0 * w + x0] + wx1 * plane[y0 * w + x1])
                            + wy1 * (wx0 * plane[y1 * w + x0] + wx1 * plane[y1 * w + x1]),
                    );
                }
            }
        }
        let value = Tensor::from_parts(Shape::new(&[d[0], d[1], out_h, out_w])?, out);
        let in_shape = tx.shape().clone();
        self.push_op("bilinear_resize", &[x], value, move |g, _| {
            let gd = g.data();
            let mut gx = vec![T::zero(); planes * h * w];
            for p in 0..planes {
                let plane = &mut gx[p * h * w..(p + 1) * h * w];
                let gp = &gd[p * out_h * out_w..(p + 1) * out_h * out_w];
                for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx0, wx1)) in tx_.iter().enumerate() {
                        let v = gp[oy * out_w + ox];
                        plane[y0 * w + x0] += v * wy0 * wx0;
                        plane[y0 * w + x1] += v * wy0 * wx1;
                        plane[y1 * w + x0] += v * wy1 * wx0;
                        plane[y1 * w + x1] += v * wy1 * wx1;
                    }
                }
            }
            vec![Some(Tensor::from_parts(in_shape.clone(), gx))]
        })
    }
}
