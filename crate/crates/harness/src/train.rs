//! The training loop.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use cdnet_core::Graph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::augment;
use crate::checkpoint::Checkpoint;
use crate::config::{DataSection, ProviderMode, TrainConfig};
use crate::data::{load_dir, stack, synthetic, Sample};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsRecord};
use crate::network::Network;
use crate::optim::{cosine_lr, AdamW};

pub const CHECKPOINT_FILE: &str = "checkpoint.cdck";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
const EVAL_BATCH: usize = 8;
/// The sampler runs on its own stream so it never overlaps parameter init.
const SAMPLER_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub main: f64,
    pub main_focal: f64,
    pub main_dice: f64,
    pub aux: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val: Option<MetricsRecord>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub records: Vec<StepRecord>,
    pub metrics: Option<MetricsRecord>,
}

/// Training and validation samples named by the configuration.
pub fn datasets(cfg: &TrainConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    match &cfg.data {
        DataSection::Synthetic { spec, train, val } => {
            Ok((synthetic(spec, 0, *train as u64), synthetic(spec, *train as u64, *val as u64)))
        }
        DataSection::Dir { train, val } => {
            let tr = load_dir(train)?;
            if tr.is_empty() {
                return Err(Error::data(train, "no training pairs"));
            }
            let va = match val {
                Some(v) => load_dir(v)?,
                None => Vec::new(),
            };
            Ok((tr, va))
        }
    }
}

fn scalar(g: &Graph<f32>, v: cdnet_core::Var) -> f64 {
    f64::from(g.value(v).data()[0])
}

/// Runs the configured number of steps, writing the log, checkpoints and
/// final validation metrics under `output_dir`. With `progress`, one line per
/// logged step goes to stderr.
pub fn train(cfg: &TrainConfig, progress: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;
    write_file(&out.join("config.json"), cfg.to_json().as_bytes())?;

    let mut net = Network::build(cfg)?;
    let (train_set, val_set) = datasets(cfg)?;
    if cfg.provider.mode == ProviderMode::Files {
        if let Some(s) = train_set.iter().find(|s| (s.h, s.w) != (cfg.patch_size, cfg.patch_size)) {
            return Err(Error::Config(format!("files mode needs {p}x{p} samples, {} is {}x{}", s.id, s.h, s.w, p = cfg.patch_size)));
        }
    }
    let mut opt = AdamW::new(net.adamw_config(), &net.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SAMPLER_STREAM);
    let loss_cfg = cfg.loss_config();
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let log_path = out.join(LOG_FILE);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(log_path.display().to_string(), e))?);
    let mut records = Vec::new();

    for step in 0..cfg.steps {
        let lr = cosine_lr(step, cfg.steps, cfg.lr_init, cfg.lr_min)?;
        let picked: Vec<Sample> = (0..cfg.batch_size)
            .map(|_| {
                let s = &train_set[rng.random_range(0..train_set.len())];
                augment(s, &cfg.augment, cfg.patch_size, &mut rng)
            })
            .collect::<Result<_>>()?;
        let batch = stack(&picked)?;

        let g = Graph::new();
        let nonfinite = |e: cdnet_core::Error| match e {
            cdnet_core::Error::NonFinite { .. } => Error::NonFinite { what: "forward value", step },
            e => e.into(),
        };
        let outputs = net.forward(&g, &batch.a, &batch.b, &batch.ids).map_err(|e| match e {
            Error::Core(c) => nonfinite(c),
            e => e,
        })?;
        let terms = cdnet_core::objectives::total_loss(&g, outputs.logits, &outputs.aux, &batch.label, &loss_cfg)
            .map_err(nonfinite)?;
        let grads = g.backward(terms.total)?;
        net.store.zero_grads();
        grads.accumulate_into(&mut net.store)?;
        opt.step(&mut net.store, lr).map_err(|e| match e {
            Error::NonFinite { what, .. } => Error::NonFinite { what, step },
            e => e,
        })?;

        let done = step + 1;
        let last = done == cfg.steps;
        let mut record = StepRecord {
            step: done,
            lr,
            loss: scalar(&g, terms.total),
            main: scalar(&g, terms.main),
            main_focal: scalar(&g, terms.main_focal),
            main_dice: scalar(&g, terms.main_dice),
            aux: scalar(&g, terms.aux),
            val: None,
        };
        drop(g);
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 && !last && !val_set.is_empty() {
            record.val = Some(evaluate(&net, &val_set, EVAL_BATCH)?);
        }
        if step == 0 || last || (cfg.log_every > 0 && done % cfg.log_every == 0) || record.val.is_some() {
            if progress {
                let val = record.val.map(|m| format!(" val_iou {:.4}", m.iou)).unwrap_or_default();
                eprintln!("step {done:>6} lr {lr:.3e} loss {:.5} main {:.5} aux {:.5}{val}", record.loss, record.main, record.aux);
            }
            serde_json::to_writer(&mut log, &record)?;
            log.write_all(b"\n").map_err(|e| Error::io(log_path.display().to_string(), e))?;
            log.flush().map_err(|e| Error::io(log_path.display().to_string(), e))?;
            records.push(record);
        }
        if last || (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) {
            Checkpoint::capture(&net.store, &opt, done, &rng, cfg.checkpoint_json())?.save(&ckpt_path)?;
        }
    }
    if cfg.steps == 0 {
        Checkpoint::capture(&net.store, &opt, 0, &rng, cfg.checkpoint_json())?.save(&ckpt_path)?;
    }

    let metrics = if val_set.is_empty() {
        None
    } else {
        let m = evaluate(&net, &val_set, EVAL_BATCH)?;
        write_file(&out.join(METRICS_FILE), serde_json::to_string_pretty(&m)?.as_bytes())?;
        Some(m)
    };
    Ok(TrainOutcome { checkpoint: ckpt_path, records, metrics })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}
