//! Four-stage convolutional backbone and the top-down FPN.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{spatial, Builder, Conv2d, ConvNormRelu};
use crate::param::ParamStore;
use crate::tensor::Real;

pub const STAGE_STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Debug, Clone)]
pub struct Backbone {
    stages: Vec<[ConvNormRelu; 2]>,
}

impl Backbone {
    /// Each stage is two 3x3 conv+norm+ReLU blocks whose first conv is
    /// strided. The first stage strides both convs to reach stride 4.
    pub fn new(b: &mut Builder, channels: [usize; 4]) -> Result<Self> {
        let mut s = b.scope("backbone");
        let mut stages = Vec::with_capacity(4);
        let mut cin = 3;
        for (i, &cout) in channels.iter().enumerate() {
            let mut st = s.scope(&format!("stage{}", i + 1));
            let second_stride = if i == 0 { 2 } else { 1 };
            stages.push([
                ConvNormRelu::new(&mut st, "block1", cin, cout, 3, 2)?,
                ConvNormRelu::new(&mut st, "block2", cout, cout, 3, second_stride)?,
            ]);
            cin = cout;
        }
        Ok(Self { stages })
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, s: &ParamStore<T>, img: Var) -> Result<Vec<Var>> {
        let d = g.dims(img);
        if d.len() != 4 || d[1] != 3 {
            return Err(Error::shape("backbone", format!("expected [B,3,H,W], got {d:?}")));
        }
        if d[2] % 32 != 0 || d[3] % 32 != 0 {
            return Err(Error::shape("backbone", format!("{}x{} is not divisible by 32", d[2], d[3])));
        }
        let mut x = img;
        let mut out = Vec::with_capacity(4);
        for [a, b] in &self.stages {
            x = a.forward(g, s, x)?;
            x = b.forward(g, s, x)?;
            out.push(x);
        }
        Ok(out)
    }
}

/// Bias-free 1x1 laterals to a common width, top-down 2x bilinear merge, 3x3
/// smoothing.
#[derive(Debug, Clone)]
pub struct Fpn {
    pub laterals: Vec<Conv2d>,
    pub smooth: Vec<Conv2d>,
}

impl Fpn {
    pub fn new(b: &mut Builder, in_channels: [usize; 4], width: usize) -> Result<Self> {
        let mut s = b.scope("fpn");
        let mut laterals = Vec::new();
        let mut smooth = Vec::new();
        for (i, &c) in in_channels.iter().enumerate() {
            laterals.push(Conv2d::new(&mut s, &format!("lateral{}", i + 1), c, width, 1, 1, 1, false)?);
            smooth.push(Conv2d::new(&mut s, &format!("smooth{}", i + 1), width, width, 3, 1, 1, false)?);
        }
        Ok(Self { laterals, smooth })
    }

    /// Merged maps before smoothing.
    pub fn top_down<T: Real>(&self, g: &Graph<T>, s: &ParamStore<T>, stages: &[Var]) -> Result<[Var; 4]> {
        if stages.len() != 4 {
            return Err(Error::invalid(format!("FPN expects 4 stages, got {}", stages.len())));
        }
        let mut merged: Vec<Var> = Vec::with_capacity(4);
        let mut above: Option<Var> = None;
        for l in (0..4).rev() {
            let lat = self.laterals[l].forward(g, s, stages[l])?;
            let p = match above {
                None => lat,
                Some(up) => {
                    let (h, w) = spatial(g, lat);
                    let up = g.bilinear_resize(up, h, w)?;
                    g.add(lat, up)?
                }
            };
            merged.push(p);
            above = Some(p);
        }
        merged.reverse();
        Ok([merged[0], merged[1], merged[2], merged[3]])
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, s: &ParamStore<T>, stages: &[Var]) -> Result<[Var; 4]> {
        let merged = self.top_down(g, s, stages)?;
        let mut out = merged;
        for (l, p) in merged.into_iter().enumerate() {
            out[l] = self.smooth[l].forward(g, s, p)?;
        }
        Ok(out)
    }
}
