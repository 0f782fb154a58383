//! Transformer block and its residual-conv replacement.

use crate::decoder::attention::{ChannelAttention, SpatialDiffAttention};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::nn::{Builder, Conv2d, GroupNorm};
use crate::ops::RMSNORM_EPS;
use crate::param::{ParamId, ParamStore};
use crate::tensor::Real;

/// RMSNorm over the channel axis of `[B,C,H,W]`.
#[derive(Debug, Clone)]
pub struct ChannelRmsNorm {
    pub gain: ParamId,
}

impl ChannelRmsNorm {
    pub fn new(b: &mut Builder, name: &str, channels: usize) -> Result<Self> {
        Ok(Self { gain: b.scope(name).constant("gain", &[channels], 1.0)? })
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        g.rmsnorm(x, g.param(s, self.gain), 1, T::lit(RMSNORM_EPS))
    }
}

/// 1x1 expand, depthwise 3x3, ReLU, 1x1 back.
#[derive(Debug, Clone)]
pub struct ConvFfn {
    pub expand: Conv2d,
    pub depthwise: Conv2d,
    pub proj: Conv2d,
}

impl ConvFfn {
    pub fn new(b: &mut Builder, name: &str, channels: usize) -> Result<Self> {
        let mut s = b.scope(name);
        let hidden = 2 * channels;
        Ok(Self {
            expand: Conv2d::new(&mut s, "expand", channels, hidden, 1, 1, 1, false)?,
            depthwise: Conv2d::new(&mut s, "depthwise", hidden, hidden, 3, 1, hidden, false)?,
            proj: Conv2d::new(&mut s, "proj", hidden, channels, 1, 1, 1, false)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.expand.forward(g, s, x)?;
        let y = self.depthwise.forward(g, s, y)?;
        let y = g.relu(y)?;
        self.proj.forward(g, s, y)
    }
}

/// Pre-norm residual branches: spatial attention, channel attention, FFN.
#[derive(Debug, Clone)]
pub struct S2dtBlock {
    pub norm1: ChannelRmsNorm,
    pub spatial: SpatialDiffAttention,
    pub norm2: ChannelRmsNorm,
    pub channel: ChannelAttention,
    pub norm3: ChannelRmsNorm,
    pub ffn: ConvFfn,
}

impl S2dtBlock {
    pub fn new(b: &mut Builder, name: &str, channels: usize, heads: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            norm1: ChannelRmsNorm::new(&mut s, "norm1", channels)?,
            spatial: SpatialDiffAttention::new(&mut s, "spatial", channels, heads)?,
            norm2: ChannelRmsNorm::new(&mut s, "norm2", channels)?,
            channel: ChannelAttention::new(&mut s, "channel", channels, heads)?,
            norm3: ChannelRmsNorm::new(&mut s, "norm3", channels)?,
            ffn: ConvFfn::new(&mut s, "ffn", channels)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let y1 = g.add(x, self.spatial.forward(g, s, self.norm1.forward(g, s, x)?)?)?;
        let y2 = g.add(y1, self.channel.forward(g, s, self.norm2.forward(g, s, y1)?)?)?;
        g.add(y2, self.ffn.forward(g, s, self.norm3.forward(g, s, y2)?)?)
    }
}

/// `x + conv(relu(norm(conv(x))))`.
#[derive(Debug, Clone)]
pub struct ResidualConvBlock {
    pub conv1: Conv2d,
    pub norm: GroupNorm,
    pub conv2: Conv2d,
}

impl ResidualConvBlock {
    pub fn new(b: &mut Builder, name: &str, channels: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            conv1: Conv2d::new(&mut s, "conv1", channels, channels, 3, 1, 1, false)?,
            norm: GroupNorm::new(&mut s, "norm", channels)?,
            conv2: Conv2d::new(&mut s, "conv2", channels, channels, 3, 1, 1, false)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(g, s, x)?;
        let y = g.relu(self.norm.forward(g, s, y)?)?;
        g.add(x, self.conv2.forward(g, s, y)?)
    }
}

/// The per-level transform: the transformer block or the ablation block.
#[derive(Debug, Clone)]
pub enum LevelBlock {
    S2dt(S2dtBlock),
    ResidualConv(ResidualConvBlock),
}

impl LevelBlock {
    pub fn forward<T: Real>(&self, g: &Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        match self {
            LevelBlock::S2dt(b) => b.forward(g, s, x),
            LevelBlock::ResidualConv(b) => b.forward(g, s, x),
        }
    }
}
