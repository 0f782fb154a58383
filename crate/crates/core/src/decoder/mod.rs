//! Top-down decoder: per-level transformer blocks joined by gated fusion,
//! with a logit head on every level.

pub mod attention;
pub mod block;

pub use attention::{channel_attention_core, differential_attention, ChannelAttention, SpatialDiffAttention, HALO, WINDOW};
pub use block::{ConvFfn, LevelBlock, ResidualConvBlock, S2dtBlock};

use crate::encoder::Pyramid;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{spatial, Builder, Conv2d, ConvNormRelu};
use crate::param::ParamStore;
use crate::tensor::Real;

/// `M = U + g ⊙ (D − U)` with `g = σ(conv3x3([D; U]))` and `U` the upsampled
/// coarser output.
#[derive(Debug, Clone)]
pub struct GatedFuse {
    pub gate: Conv2d,
}

impl GatedFuse {
    pub fn new(b: &mut Builder, name: &str, channels: usize) -> Result<Self> {
        Ok(Self { gate: Conv2d::new(&mut b.scope(name), "gate", 2 * channels, channels, 3, 1, 1, true)? })
    }

    /// The fused map before the level transform.
    pub fn mix<T: Real>(&self, g: &Graph<T>, s: &ParamStore<T>, d: Var, above: Var) -> Result<Var> {
        let (h, w) = spatial(g, d);
        let (ha, wa) = spatial(g, above);
        if ha * 2 != h || wa * 2 != w {
            return Err(Error::shape("gated_fuse", format!("{ha}x{wa} is not half of {h}x{w}")));
        }
        let u = g.bilinear_resize(above, h, w)?;
        let gate = g.sigmoid(self.gate.forward(g, s, g.concat(&[d, u], 1)?)?)?;
        g.add(u, g.mul(gate, g.sub(d, u)?)?)
    }
}

/// 3x3 conv+norm+ReLU, then a 1x1 conv to one logit channel.
#[derive(Debug, Clone)]
pub struct Head {
    pub conv: ConvNormRelu,
    pub out: Conv2d,
}

impl Head {
    pub fn new(b: &mut Builder, name: &str, channels: usize) -> Result<Self> {
        let mut s = b.scope(name);
        let hidden = channels / 2;
        Ok(Self {
            conv: ConvNormRelu::new(&mut s, "conv", channels, hidden, 3, 1)?,
            out: Conv2d::new(&mut s, "out", hidden, 1, 1, 1, 1, true)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, s: &ParamStore<T>, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = self.conv.forward(g, s, x)?;
        let y = self.out.forward(g, s, y)?;
        g.bilinear_resize(y, out_h, out_w)
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    /// Finest level first.
    pub blocks: Vec<LevelBlock>,
    /// Gates for levels 1 to 3.
    pub fuse: Vec<GatedFuse>,
    pub heads: Vec<Head>,
}

pub struct Decoded {
    /// Full-resolution logits, finest level first.
    pub aux: [Var; 4],
    pub features: [Var; 4],
}

impl Decoder {
    pub fn new(b: &mut Builder, channels: usize, heads: usize, use_s2dt: bool) -> Result<Self> {
        let mut s = b.scope("decoder");
        let mut blocks = Vec::with_capacity(4);
        let mut fuse = Vec::with_capacity(3);
        let mut out_heads = Vec::with_capacity(4);
        for l in 1..=4 {
            let name = format!("block{l}");
            blocks.push(if use_s2dt {
                LevelBlock::S2dt(S2dtBlock::new(&mut s, &name, channels, heads)?)
            } else {
                LevelBlock::ResidualConv(ResidualConvBlock::new(&mut s, &name, channels)?)
            });
            if l < 4 {
                fuse.push(GatedFuse::new(&mut s, &format!("fuse{l}"), channels)?);
            }
            out_heads.push(Head::new(&mut s, &format!("head{l}"), channels)?);
        }
        Ok(Self { blocks, fuse, heads: out_heads })
    }

    /// Coarsest level first: `F4 = Φ(D4)`, then `F_l = Φ(G(D_l, F_{l+1}))`.
    pub fn forward<T: Real>(&self, g: &Graph<T>, s: &ParamStore<T>, prior: &Pyramid, out_h: usize, out_w: usize) -> Result<Decoded> {
        let mut features = *prior;
        features[3] = self.blocks[3].forward(g, s, prior[3])?;
        for l in (0..3).rev() {
            let m = self.fuse[l].mix(g, s, prior[l], features[l + 1])?;
            features[l] = self.blocks[l].forward(g, s, m)?;
        }
        let mut aux = features;
        for l in 0..4 {
            aux[l] = self.heads[l].forward(g, s, features[l], out_h, out_w)?;
        }
        Ok(Decoded { aux, features })
    }
}
