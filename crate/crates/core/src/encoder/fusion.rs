//! Foundation-feature adaptation and fusion with the pyramid stream.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Builder, Conv2d, GroupNorm};
use crate::ops::Reduce;
use crate::param::ParamStore;
use crate::tensor::Real;

pub const CBAM_REDUCTION: usize = 8;
pub const CBAM_SPATIAL_KERNEL: usize = 7;

/// Lite adaptation: resize to the pyramid level, 1x1 projection, norm+ReLU,
/// then a residual depthwise 3x3. Bias-free, so zero features map to zero.
#[derive(Debug, Clone)]
pub struct Lam {
    pub proj: Conv2d,
    pub norm: GroupNorm,
    pub depthwise: Conv2d,
    pub in_channels: usize,
}

impl Lam {
    pub fn new(b: &mut Builder, name: &str, in_channels: usize, width: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            proj: Conv2d::new(&mut s, "proj", in_channels, width, 1, 1, 1, false)?,
            norm: GroupNorm::new(&mut s, "norm", width)?,
            depthwise: Conv2d::new(&mut s, "depthwise", width, width, 3, 1, width, false)?,
            in_channels,
        })
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, s: &ParamStore<T>, f: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let d = g.dims(f);
        if d.len() != 4 || d[1] != self.in_channels {
            return Err(Error::shape("lam", format!("expected {} feature channels, got {d:?}", self.in_channels)));
        }
        let x = g.bilinear_resize(f, out_h, out_w)?;
        let x = self.proj.forward(g, s, x)?;
        let x = self.norm.forward(g, s, x)?;
        let x = g.relu(x)?;
        let y = self.depthwise.forward(g, s, x)?;
        g.add(x, y)
    }
}

/// Channel gate from pooled descriptors through a shared MLP, then a spatial
/// gate from channel-mean and channel-max maps.
#[derive(Debug, Clone)]
pub struct Cbam {
    pub fc1: Conv2d,
    pub fc2: Conv2d,
    pub spatial: Conv2d,
    pub channels: usize,
}

impl Cbam {
    pub fn new(b: &mut Builder, name: &str, channels: usize) -> Result<Self> {
        if channels < CBAM_REDUCTION {
            return Err(Error::invalid(format!("CBAM needs at least {CBAM_REDUCTION} channels, got {channels}")));
        }
        let hidden = channels / CBAM_REDUCTION;
        let mut s = b.scope(name);
        Ok(Self {
            fc1: Conv2d::new(&mut s, "fc1", channels, hidden, 1, 1, 1, true)?,
            fc2: Conv2d::new(&mut s, "fc2", hidden, channels, 1, 1, 1, true)?,
            spatial: Conv2d::new(&mut s, "spatial", 2, 1, CBAM_SPATIAL_KERNEL, 1, 1, true)?,
            channels,
        })
    }

    fn mlp<T: Real>(&self, g: &Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, s, x)?;
        let h = g.relu(h)?;
        self.fc2.forward(g, s, h)
    }

    pub fn channel_gate<T: Real>(&self, g: &Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let avg = g.reduce(x, &[2, 3], Reduce::Mean, true)?;
        let max = g.reduce(x, &[2, 3], Reduce::Max, true)?;
        let a = self.mlp(g, s, avg)?;
        let m = self.mlp(g, s, max)?;
        g.sigmoid(g.add(a, m)?)
    }

    pub fn spatial_gate<T: Real>(&self, g: &Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let avg = g.reduce(x, &[1], Reduce::Mean, true)?;
        let max = g.reduce(x, &[1], Reduce::Max, true)?;
        let maps = g.concat(&[avg, max], 1)?;
        g.sigmoid(self.spatial.forward(g, s, maps)?)
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let d = g.dims(x);
        if d.len() != 4 || d[1] != self.channels {
            return Err(Error::shape("cbam", format!("expected {} channels, got {d:?}", self.channels)));
        }
        let x = g.mul(x, self.channel_gate(g, s, x)?)?;
        let gate = self.spatial_gate(g, s, x)?;
        g.mul(x, gate)
    }
}

/// Concatenate, depthwise 3x3, pointwise back to the pyramid width,
/// norm+ReLU, CBAM.
#[derive(Debug, Clone)]
pub struct Dffm {
    pub depthwise: Conv2d,
    pub pointwise: Conv2d,
    pub norm: GroupNorm,
    pub cbam: Cbam,
}

impl Dffm {
    pub fn new(b: &mut Builder, name: &str, width: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            depthwise: Conv2d::new(&mut s, "depthwise", 2 * width, 2 * width, 3, 1, 2 * width, false)?,
            pointwise: Conv2d::new(&mut s, "pointwise", 2 * width, width, 1, 1, 1, false)?,
            norm: GroupNorm::new(&mut s, "norm", width)?,
            cbam: Cbam::new(&mut s, "cbam", width)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, s: &ParamStore<T>, pyramid: Var, adapted: Var) -> Result<Var> {
        let (a, b) = (g.dims(pyramid), g.dims(adapted));
        if a != b {
            return Err(Error::shape("dffm", format!("pyramid {a:?} vs adapted {b:?}")));
        }
        let x = g.concat(&[pyramid, adapted], 1)?;
        let x = self.depthwise.forward(g, s, x)?;
        let x = self.pointwise.forward(g, s, x)?;
        let x = self.norm.forward(g, s, x)?;
        let x = g.relu(x)?;
        self.cbam.forward(g, s, x)
    }
}
