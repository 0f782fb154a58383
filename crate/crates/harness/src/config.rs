//! JSON training configuration.

use std::path::{Path, PathBuf};

use cdnet_core::model::ModelConfig;
use cdnet_core::objectives::LossConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::SyntheticSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub loss: LossSection,
    pub model: ModelSection,
    pub provider: ProviderSection,
    pub augment: AugmentConfig,
    pub data: DataSection,
    pub output_dir: PathBuf,
    /// Zero disables intermediate checkpoints; the final one is always written.
    pub checkpoint_every: u64,
    pub log_every: u64,
    /// Validation during training; zero evaluates only at the end.
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 2000,
            batch_size: 8,
            patch_size: 64,
            lr_init: 5e-4,
            lr_min: 1e-7,
            weight_decay: 0.01,
            loss: LossSection::default(),
            model: ModelSection::default(),
            provider: ProviderSection::default(),
            augment: AugmentConfig::default(),
            data: DataSection::default(),
            output_dir: PathBuf::from("runs/default"),
            checkpoint_every: 0,
            log_every: 50,
            eval_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub beta: f64,
    pub gamma: f64,
    pub focal_alpha: f64,
    pub dice_smooth: f64,
    pub aux_weight: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let d = LossConfig::default();
        Self { beta: d.beta, gamma: d.gamma, focal_alpha: d.focal_alpha, dice_smooth: d.dice_smooth, aux_weight: d.aux_weight }
    }
}

impl From<&LossSection> for LossConfig {
    fn from(s: &LossSection) -> Self {
        LossConfig { beta: s.beta, gamma: s.gamma, focal_alpha: s.focal_alpha, dice_smooth: s.dice_smooth, aux_weight: s.aux_weight }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub width: usize,
    pub backbone_channels: [usize; 4],
    pub heads: usize,
    pub morph_tau: f64,
    pub use_dffm: bool,
    pub use_s2dt: bool,
    pub use_lmm: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::default();
        Self {
            width: d.width,
            backbone_channels: d.backbone_channels,
            heads: d.heads,
            morph_tau: d.morph_tau,
            use_dffm: d.use_dffm,
            use_s2dt: d.use_s2dt,
            use_lmm: d.use_lmm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderMode {
    Standin,
    Files,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderSection {
    pub mode: ProviderMode,
    /// Initialization seed of the stand-in network.
    pub seed: u64,
    pub channels: usize,
    pub features_dir: Option<PathBuf>,
}

impl Default for ProviderSection {
    fn default() -> Self {
        Self { mode: ProviderMode::Standin, seed: 1234, channels: 64, features_dir: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub hflip: bool,
    pub vflip: bool,
    pub rotate: bool,
    pub crop: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { hflip: true, vflip: true, rotate: true, crop: true }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self { hflip: false, vflip: false, rotate: false, crop: false }
    }

    pub fn any(&self) -> bool {
        self.hflip || self.vflip || self.rotate || self.crop
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSection {
    /// Pairs generated in memory; validation ids follow the training ids.
    Synthetic { spec: SyntheticSpec, train: usize, val: usize },
    /// `<root>/{A,B,label}/<id>.png` trees.
    Dir { train: PathBuf, val: Option<PathBuf> },
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection::Synthetic { spec: SyntheticSpec::default(), train: 512, val: 64 }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: TrainConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// The JSON embedded in checkpoints. The output directory is left out, so
    /// runs that differ only in where they write produce identical files.
    pub fn checkpoint_json(&self) -> String {
        Self { output_dir: PathBuf::new(), ..self.clone() }.to_json()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.patch_size % 32 != 0 {
            return fail(format!("patch_size {} is not a positive multiple of 32", self.patch_size));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.lr_min > 0.0 && self.lr_init > self.lr_min) {
            return fail(format!("need lr_init > lr_min > 0, got {} and {}", self.lr_init, self.lr_min));
        }
        if self.weight_decay < 0.0 {
            return fail("weight_decay must be non-negative".into());
        }
        if self.model.morph_tau <= 0.0 {
            return fail("model.morph_tau must be positive".into());
        }
        if self.model.width % self.model.heads.max(1) != 0 || self.model.heads == 0 {
            return fail(format!("width {} does not split into {} heads", self.model.width, self.model.heads));
        }
        if self.provider.mode == ProviderMode::Files {
            if self.provider.features_dir.is_none() {
                return fail("provider.features_dir is required in files mode".into());
            }
            if self.augment.any() {
                return fail("augmentation must be disabled in files mode: stored features describe unaugmented images".into());
            }
        }
        if let DataSection::Synthetic { spec, train, .. } = &self.data {
            spec.validate()?;
            if *train == 0 {
                return fail("data.synthetic.train must be at least 1".into());
            }
            if spec.size < self.patch_size {
                return fail(format!("synthetic size {} is smaller than patch_size {}", spec.size, self.patch_size));
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            width: self.model.width,
            backbone_channels: self.model.backbone_channels,
            heads: self.model.heads,
            provider_channels: self.provider.channels,
            morph_tau: self.model.morph_tau,
            use_dffm: self.model.use_dffm,
            use_s2dt: self.model.use_s2dt,
            use_lmm: self.model.use_lmm,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        (&self.loss).into()
    }
}
