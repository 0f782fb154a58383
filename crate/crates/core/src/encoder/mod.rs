//! Siamese encoder: conv pyramid fused with frozen foundation features.

pub mod backbone;
pub mod fusion;
pub mod provider;

pub use backbone::{Backbone, Fpn, STAGE_STRIDES};
pub use fusion::{Cbam, Dffm, Lam};
pub use provider::{FileProvider, FoundationProvider, StandIn, NUM_TAPS};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{spatial, Builder};
use crate::param::ParamStore;
use crate::tensor::Real;

/// Four levels, finest first, at strides 4, 8, 16 and 32.
pub type Pyramid = [Var; 4];

#[derive(Debug, Clone)]
pub struct Encoder {
    pub backbone: Backbone,
    pub fpn: Fpn,
    /// Present only when foundation fusion is enabled.
    pub fusion: Option<Vec<(Lam, Dffm)>>,
}

impl Encoder {
    pub fn new(b: &mut Builder, backbone_channels: [usize; 4], width: usize, provider_channels: usize, use_dffm: bool) -> Result<Self> {
        let mut s = b.scope("encoder");
        let backbone = Backbone::new(&mut s, backbone_channels)?;
        let fpn = Fpn::new(&mut s, backbone_channels, width)?;
        let fusion = if use_dffm {
            let mut levels = Vec::with_capacity(4);
            for l in 1..=4 {
                let lam = Lam::new(&mut s, &format!("lam{l}"), provider_channels, width)?;
                let dffm = Dffm::new(&mut s, &format!("dffm{l}"), width)?;
                levels.push((lam, dffm));
            }
            Some(levels)
        } else {
            None
        };
        Ok(Self { backbone, fpn, fusion })
    }

    /// One temporal image through the shared weights.
    pub fn encode<T: Real>(
        &self,
        g: &Graph<T>,
        model: &ParamStore<T>,
        provider: &FoundationProvider,
        provider_store: &ParamStore<T>,
        img: Var,
        image_ids: Option<&[String]>,
    ) -> Result<Pyramid> {
        let stages = self.backbone.forward(g, model, img)?;
        let pyramid = self.fpn.forward(g, model, &stages)?;
        let Some(fusion) = &self.fusion else { return Ok(pyramid) };
        let taps = provider.features(g, provider_store, img, image_ids)?;
        let mut out = pyramid;
        for (l, (lam, dffm)) in fusion.iter().enumerate() {
            let (h, w) = spatial(g, pyramid[l]);
            let adapted = lam.forward(g, model, taps[l], h, w)?;
            out[l] = dffm.forward(g, model, pyramid[l], adapted)?;
        }
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn encode_pair<T: Real>(
        &self,
        g: &Graph<T>,
        model: &ParamStore<T>,
        provider: &FoundationProvider,
        provider_store: &ParamStore<T>,
        img_t1: Var,
        img_t2: Var,
        ids: Option<(&[String], &[String])>,
    ) -> Result<(Pyramid, Pyramid)> {
        if g.dims(img_t1) != g.dims(img_t2) {
            return Err(Error::shape("encode_pair", format!("{:?} vs {:?}", g.dims(img_t1), g.dims(img_t2))));
        }
        let p1 = self.encode(g, model, provider, provider_store, img_t1, ids.map(|i| i.0))?;
        let p2 = self.encode(g, model, provider, provider_store, img_t2, ids.map(|i| i.1))?;
        Ok((p1, p2))
    }
}

/// Per-level absolute difference of the two pyramids.
pub fn change_prior<T: Real>(g: &Graph<T>, p1: &Pyramid, p2: &Pyramid) -> Result<Pyramid> {
    let mut out = *p1;
    for l in 0..4 {
        if g.dims(p1[l]) != g.dims(p2[l]) {
            return Err(Error::shape("change_prior", format!("level {}: {:?} vs {:?}", l + 1, g.dims(p1[l]), g.dims(p2[l]))));
        }
        out[l] = g.abs(g.sub(p1[l], p2[l])?)?;
    }
    Ok(out)
}
