#![allow(dead_code)]

use std::path::Path;

use cdnet::config::{DataSection, TrainConfig};
use cdnet::synth::SyntheticSpec;

/// A small model and dataset that trains in seconds.
pub fn tiny_config(out: &Path) -> TrainConfig {
    let mut cfg = TrainConfig { steps: 6, batch_size: 2, log_every: 2, eval_every: 3, output_dir: out.to_path_buf(), ..TrainConfig::default() };
    cfg.model.width = 16;
    cfg.model.backbone_channels = [8, 16, 16, 32];
    cfg.provider.channels = 16;
    cfg.data = DataSection::Synthetic { spec: SyntheticSpec::default(), train: 8, val: 4 };
    cfg
}
