//! Model, parameters and feature provider bundled for training and inference.

use std::path::Path;

use cdnet_core::encoder::{FileProvider, FoundationProvider, StandIn};
use cdnet_core::model::{ChangeModel, Outputs};
use cdnet_core::{Graph, ParamStore, Tensor};

use crate::checkpoint::Checkpoint;
use crate::config::{ProviderMode, TrainConfig};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};

pub struct Network {
    pub config: TrainConfig,
    pub model: ChangeModel,
    pub store: ParamStore<f32>,
    pub provider: FoundationProvider,
    pub provider_store: ParamStore<f32>,
}

impl Network {
    pub fn build(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let (model, store) = ChangeModel::build(&config.model_config(), config.seed)?;
        let (provider, provider_store) = match config.provider.mode {
            ProviderMode::Standin => {
                let (net, store) = StandIn::build(config.provider.seed, config.provider.channels)?;
                (FoundationProvider::StandIn(net), store)
            }
            ProviderMode::Files => {
                let dir = config.provider.features_dir.clone().expect("validated");
                (FoundationProvider::Files(FileProvider::new(dir, config.provider.channels)), ParamStore::new())
            }
        };
        Ok(Self { config: config.clone(), model, store, provider, provider_store })
    }

    /// Rebuilds the network recorded in a checkpoint, with its optimizer state.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, AdamW)> {
        let config: TrainConfig =
            serde_json::from_str(&ckpt.config_json).map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
        let mut net = Self::build(&config)?;
        let opt_config = net.adamw_config();
        let opt = ckpt.restore(&mut net.store, opt_config)?;
        Ok((net, opt))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_checkpoint(&Checkpoint::load(path)?)?.0)
    }

    pub fn adamw_config(&self) -> AdamWConfig {
        AdamWConfig { weight_decay: self.config.weight_decay, ..AdamWConfig::default() }
    }

    /// Feature-file ids for the two epochs of each pair.
    pub fn provider_ids(ids: &[String]) -> (Vec<String>, Vec<String>) {
        (ids.iter().map(|i| format!("A/{i}")).collect(), ids.iter().map(|i| format!("B/{i}")).collect())
    }

    pub fn forward(&self, g: &Graph<f32>, a: &Tensor<f32>, b: &Tensor<f32>, ids: &[String]) -> Result<Outputs> {
        let x1 = g.constant(a.clone());
        let x2 = g.constant(b.clone());
        let (ia, ib) = Self::provider_ids(ids);
        Ok(self.model.forward(g, &self.store, &self.provider, &self.provider_store, x1, x2, Some((&ia, &ib)))?)
    }

    /// Final logits `[B,1,H,W]` without recording gradients.
    pub fn predict_logits(&self, a: &Tensor<f32>, b: &Tensor<f32>, ids: &[String]) -> Result<Tensor<f32>> {
        let g = Graph::new();
        let out = self.forward(&g, a, b, ids)?;
        Ok(g.value(out.logits))
    }
}
