//! Frozen foundation-feature providers.
//!
//! A provider maps an image batch to four feature maps with a fixed channel
//! count at provider-chosen spatial sizes. Nothing on the provider side is
//! trained: the stand-in network's parameters are built frozen, and file
//! features enter the graph as constants.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{init_rng, Builder, ConvNormRelu};
use crate::param::ParamStore;
use crate::tensor::{Real, Tensor};

pub const NUM_TAPS: usize = 4;

/// Randomly initialized convolutional stand-in with ViT-like geometry: a
/// stride-16 stem followed by four residual blocks, one tap after each.
#[derive(Debug, Clone)]
pub struct StandIn {
    stem: Vec<ConvNormRelu>,
    blocks: Vec<ConvNormRelu>,
    channels: usize,
    seed: u64,
}

impl StandIn {
    /// Builds the network and its frozen parameters from `seed`.
    pub fn build(seed: u64, channels: usize) -> Result<(Self, ParamStore<f32>)> {
        let mut store = ParamStore::new();
        let mut rng = init_rng(seed);
        let mut b = Builder::new(&mut store, &mut rng).frozen();
        let mut s = b.scope("provider");
        let half = (channels / 2).max(1);
        let stem = vec![
            ConvNormRelu::new(&mut s, "stem1", 3, half, 3, 2)?,
            ConvNormRelu::new(&mut s, "stem2", half, channels, 3, 2)?,
            ConvNormRelu::new(&mut s, "stem3", channels, channels, 3, 2)?,
            ConvNormRelu::new(&mut s, "stem4", channels, channels, 3, 2)?,
        ];
        let blocks = (0..NUM_TAPS)
            .map(|i| ConvNormRelu::new(&mut s, &format!("block{}", i + 1), channels, channels, 3, 1))
            .collect::<Result<Vec<_>>>()?;
        Ok((Self { stem, blocks, channels, seed }, store))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, s: &ParamStore<T>, img: Var) -> Result<Vec<Var>> {
        let mut x = img;
        for layer in &self.stem {
            x = layer.forward(g, s, x)?;
        }
        let mut taps = Vec::with_capacity(NUM_TAPS);
        for block in &self.blocks {
            let y = block.forward(g, s, x)?;
            x = g.add(x, y)?;
            taps.push(x);
        }
        Ok(taps)
    }
}

/// Reads `<dir>/<image_id>.l{1..4}.cdt1`, each `[C,h,w]`.
#[derive(Debug, Clone)]
pub struct FileProvider {
    dir: PathBuf,
    channels: usize,
}

impl FileProvider {
    pub fn new(dir: impl Into<PathBuf>, channels: usize) -> Self {
        Self { dir: dir.into(), channels }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, image_id: &str, level: usize) -> PathBuf {
        self.dir.join(format!("{image_id}.l{level}.cdt1"))
    }

    /// The four maps of one image, validated against the configured width.
    pub fn load(&self, image_id: &str) -> Result<Vec<Tensor<f32>>> {
        (1..=NUM_TAPS)
            .map(|level| {
                let path = self.path(image_id, level);
                let t = Tensor::<f32>::load_cdt1(&path)?;
                if t.rank() != 3 || t.dims()[0] != self.channels {
                    return Err(Error::format(format!(
                        "{}: expected [{}, h, w], got {:?}",
                        path.display(),
                        self.channels,
                        t.dims()
                    )));
                }
                Ok(t)
            })
            .collect()
    }

    /// Stacks per-image maps into `[B,C,h,w]` per level.
    pub fn batch<T: Real>(&self, image_ids: &[String]) -> Result<Vec<Tensor<T>>> {
        if image_ids.is_empty() {
            return Err(Error::invalid("empty image id list"));
        }
        let per_image: Vec<Vec<Tensor<f32>>> = image_ids.iter().map(|id| self.load(id)).collect::<Result<_>>()?;
        (0..NUM_TAPS)
            .map(|l| {
                let dims = per_image[0][l].dims().to_vec();
                let mut data = Vec::with_capacity(image_ids.len() * per_image[0][l].numel());
                for (id, maps) in image_ids.iter().zip(&per_image) {
                    if maps[l].dims() != dims.as_slice() {
                        return Err(Error::format(format!("{id}: level {} is {:?}, batch expects {dims:?}", l + 1, maps[l].dims())));
                    }
                    data.extend(maps[l].data().iter().map(|&v| T::from_f32(v).unwrap()));
                }
                Tensor::from_vec(&[image_ids.len(), dims[0], dims[1], dims[2]], data)
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub enum FoundationProvider {
    StandIn(StandIn),
    Files(FileProvider),
}

impl FoundationProvider {
    pub fn channels(&self) -> usize {
        match self {
            FoundationProvider::StandIn(s) => s.channels,
            FoundationProvider::Files(f) => f.channels,
        }
    }

    /// Four feature maps for `img`. File providers need one id per batch item.
    pub fn features<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, img: Var, image_ids: Option<&[String]>) -> Result<Vec<Var>> {
        let taps = match self {
            FoundationProvider::StandIn(s) => s.forward(g, store, img)?,
            FoundationProvider::Files(f) => {
                let ids = image_ids.ok_or_else(|| Error::invalid("file provider needs image ids"))?;
                let batch = g.dims(img)[0];
                if ids.len() != batch {
                    return Err(Error::invalid(format!("{} image ids for a batch of {batch}", ids.len())));
                }
                f.batch::<T>(ids)?.into_iter().map(|t| g.constant(t)).collect()
            }
        };
        if taps.len() != NUM_TAPS {
            return Err(Error::invalid(format!("provider returned {} maps, expected {NUM_TAPS}", taps.len())));
        }
        Ok(taps)
    }
}
