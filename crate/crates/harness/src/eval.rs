//! Dataset evaluation and single-pair prediction.

use std::path::Path;

use cdnet_core::morphology::binarize;
use cdnet_core::objectives::ConfusionCounts;
use cdnet_core::Tensor;
use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::data::{stack, Sample};
use crate::error::{Error, Result};
use crate::network::Network;

/// Flat metrics record for the change class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iou: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl From<&ConfusionCounts> for MetricsRecord {
    fn from(c: &ConfusionCounts) -> Self {
        let m = c.metrics();
        Self { iou: m.iou, f1: m.f1, precision: m.precision, recall: m.recall, tp: c.tp, fp: c.fp, fn_: c.fn_, tn: c.tn }
    }
}

/// Accumulates one confusion matrix over every image it sees.
#[derive(Debug, Clone, Default)]
pub struct Evaluator {
    pub counts: ConfusionCounts,
}

impl Evaluator {
    pub fn add_logits(&mut self, logits: &Tensor<f32>, label: &Tensor<f32>) -> Result<()> {
        let target: Vec<u8> = label.data().iter().map(|&v| u8::from(v > 0.5)).collect();
        self.counts.update(&binarize(logits), &target)?;
        Ok(())
    }

    pub fn record(&self) -> MetricsRecord {
        (&self.counts).into()
    }
}

pub fn evaluate(net: &Network, samples: &[Sample], batch_size: usize) -> Result<MetricsRecord> {
    let mut ev = Evaluator::default();
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = stack(chunk)?;
        let logits = net.predict_logits(&batch.a, &batch.b, &batch.ids)?;
        ev.add_logits(&logits, &batch.label)?;
    }
    Ok(ev.record())
}

fn load_rgb(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let img = image::open(path).map_err(|e| Error::data(path, e.to_string()))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if h % 32 != 0 || w % 32 != 0 {
        return Err(Error::data(path, format!("{w}x{h} is not a multiple of 32")));
    }
    let mut out = vec![0f32; 3 * h * w];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * h * w + i] = f32::from(px[c]) / 255.0;
        }
    }
    Ok((out, h, w))
}

/// Writes a `{0,255}` mask (and optionally an 8-bit probability map) and
/// returns the fraction of changed pixels.
pub fn predict(net: &Network, a: &Path, b: &Path, out: &Path, prob_out: Option<&Path>) -> Result<f64> {
    let (da, h, w) = load_rgb(a)?;
    let (db, hb, wb) = load_rgb(b)?;
    if (h, w) != (hb, wb) {
        return Err(Error::data(b, format!("{wb}x{hb} differs from {w}x{h}")));
    }
    let id = a.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ta = Tensor::from_vec(&[1, 3, h, w], da)?;
    let tb = Tensor::from_vec(&[1, 3, h, w], db)?;
    let logits = net.predict_logits(&ta, &tb, &[id])?;
    let mask = binarize(&logits);
    let changed = mask.iter().filter(|&&m| m == 1).count();
    let pixels: Vec<u8> = mask.iter().map(|&m| m * 255).collect();
    GrayImage::from_raw(w as u32, h as u32, pixels).expect("sized").save(out).map_err(|e| Error::data(out, e.to_string()))?;
    if let Some(p) = prob_out {
        let probs: Vec<u8> = logits.data().iter().map(|&z| (cdnet_core::ops::sigmoid(z) * 255.0).round() as u8).collect();
        GrayImage::from_raw(w as u32, h as u32, probs).expect("sized").save(p).map_err(|e| Error::data(p, e.to_string()))?;
    }
    Ok(changed as f64 / mask.len() as f64)
}
