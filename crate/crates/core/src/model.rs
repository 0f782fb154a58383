//! The full change-detection network.

use crate::decoder::Decoder;
use crate::encoder::{change_prior, Encoder, FoundationProvider, Pyramid};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::morphology::{Lmm, TRAIN_TAU};
use crate::nn::{init_rng, Builder};
use crate::param::ParamStore;
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub width: usize,
    pub backbone_channels: [usize; 4],
    pub heads: usize,
    pub provider_channels: usize,
    pub morph_tau: f64,
    /// Fuse foundation features into the pyramid; off means pyramid only.
    pub use_dffm: bool,
    /// Transformer blocks in the decoder; off means residual conv blocks.
    pub use_s2dt: bool,
    /// Morphological refinement; off means the finest auxiliary map is final.
    pub use_lmm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 64,
            backbone_channels: [32, 64, 128, 256],
            heads: 4,
            provider_channels: 64,
            morph_tau: TRAIN_TAU,
            use_dffm: true,
            use_s2dt: true,
            use_lmm: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ChangeModel {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub lmm: Option<Lmm>,
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Outputs {
    /// Final logits, `[B,1,H,W]`.
    pub logits: Var,
    /// Auxiliary logits at full resolution, finest level first.
    pub aux: [Var; 4],
    pub features: [Var; 4],
    pub prior: Pyramid,
}

impl ChangeModel {
    /// Builds the layer graph and its parameters, initialized from `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        let mut store = ParamStore::new();
        let mut rng = init_rng(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let encoder = Encoder::new(&mut b, config.backbone_channels, config.width, config.provider_channels, config.use_dffm)?;
        let decoder = Decoder::new(&mut b, config.width, config.heads, config.use_s2dt)?;
        let lmm = if config.use_lmm { Some(Lmm::new(&mut b, config.morph_tau)?) } else { None };
        Ok((Self { config: config.clone(), encoder, decoder, lmm }, store))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        provider: &FoundationProvider,
        provider_store: &ParamStore<T>,
        img_t1: Var,
        img_t2: Var,
        ids: Option<(&[String], &[String])>,
    ) -> Result<Outputs> {
        let d = g.dims(img_t1);
        if d.len() != 4 || d[1] != 3 {
            return Err(Error::shape("model", format!("expected [B,3,H,W] images, got {d:?}")));
        }
        if self.encoder.fusion.is_some() && provider.channels() != self.config.provider_channels {
            return Err(Error::invalid(format!(
                "provider yields {} channels, model expects {}",
                provider.channels(),
                self.config.provider_channels
            )));
        }
        let (p1, p2) = self.encoder.encode_pair(g, store, provider, provider_store, img_t1, img_t2, ids)?;
        let prior = change_prior(g, &p1, &p2)?;
        let decoded = self.decoder.forward(g, store, &prior, d[2], d[3])?;
        let logits = match &self.lmm {
            Some(lmm) => lmm.forward(g, store, decoded.aux[0])?,
            None => decoded.aux[0],
        };
        Ok(Outputs { logits, aux: decoded.aux, features: decoded.features, prior })
    }
}
