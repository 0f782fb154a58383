//! Datasets of `<root>/{A,B,label}/<id>.png` triples and batch assembly.

use std::path::Path;

use cdnet_core::Tensor;

use crate::error::{Error, Result};
use crate::synth::{pair_id, Pair, SyntheticSpec};

/// One pair in planar float layout: images `[3,H,W]` in `[0,1]`, label
/// `[H,W]` in `{0,1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub h: usize,
    pub w: usize,
    pub a: Vec<f32>,
    pub b: Vec<f32>,
    pub label: Vec<f32>,
}

fn planar(rgb: &[u8], h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0f32; 3 * h * w];
    for (i, px) in rgb.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * h * w + i] = f32::from(px[c]) / 255.0;
        }
    }
    out
}

impl Sample {
    pub fn from_pair(id: impl Into<String>, pair: &Pair) -> Self {
        let s = pair.size;
        Self {
            id: id.into(),
            h: s,
            w: s,
            a: planar(&pair.a, s, s),
            b: planar(&pair.b, s, s),
            label: pair.label.iter().map(|&v| f32::from(v > 127)).collect(),
        }
    }

    pub fn load(root: &Path, id: &str) -> Result<Self> {
        let path = |sub: &str| root.join(sub).join(format!("{id}.png"));
        let rgb = |p: &Path| -> Result<image::RgbImage> { Ok(image::open(p).map_err(|e| Error::data(p, e.to_string()))?.to_rgb8()) };
        let (pa, pb, pl) = (path("A"), path("B"), path("label"));
        let (a, b) = (rgb(&pa)?, rgb(&pb)?);
        let label = image::open(&pl).map_err(|e| Error::data(&pl, e.to_string()))?.to_luma8();
        if a.dimensions() != b.dimensions() {
            return Err(Error::data(&pb, format!("size {:?} differs from A {:?}", b.dimensions(), a.dimensions())));
        }
        if label.dimensions() != a.dimensions() {
            return Err(Error::data(&pl, format!("size {:?} differs from A {:?}", label.dimensions(), a.dimensions())));
        }
        if let Some(v) = label.as_raw().iter().find(|&&v| v != 0 && v != 255) {
            return Err(Error::data(&pl, format!("label value {v} is neither 0 nor 255")));
        }
        let (w, h) = (a.width() as usize, a.height() as usize);
        Ok(Self {
            id: id.to_string(),
            h,
            w,
            a: planar(a.as_raw(), h, w),
            b: planar(b.as_raw(), h, w),
            label: label.as_raw().iter().map(|&v| f32::from(v == 255)).collect(),
        })
    }
}

/// Ids present under `<root>/A`, sorted.
pub fn list_ids(root: &Path) -> Result<Vec<String>> {
    let dir = root.join("A");
    let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir.display().to_string(), e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(id) = name.strip_suffix(".png") {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(Error::data(&dir, "no .png files"));
    }
    Ok(ids)
}

pub fn load_dir(root: &Path) -> Result<Vec<Sample>> {
    list_ids(root)?.iter().map(|id| Sample::load(root, id)).collect()
}

pub fn synthetic(spec: &SyntheticSpec, start: u64, n: u64) -> Vec<Sample> {
    (start..start + n).map(|i| Sample::from_pair(pair_id(i), &spec.generate(i))).collect()
}

/// A stacked batch: images `[B,3,H,W]`, labels `[B,1,H,W]`.
pub struct Batch {
    pub a: Tensor<f32>,
    pub b: Tensor<f32>,
    pub label: Tensor<f32>,
    pub ids: Vec<String>,
}

pub fn stack(samples: &[Sample]) -> Result<Batch> {
    let first = samples.first().ok_or_else(|| Error::Config("empty batch".into()))?;
    let (h, w) = (first.h, first.w);
    let mut a = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut b = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut label = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.h, s.w) != (h, w) {
            return Err(Error::Config(format!("batch mixes sizes {}x{} and {}x{} ({})", h, w, s.h, s.w, s.id)));
        }
        a.extend_from_slice(&s.a);
        b.extend_from_slice(&s.b);
        label.extend_from_slice(&s.label);
    }
    let n = samples.len();
    Ok(Batch {
        a: Tensor::from_vec(&[n, 3, h, w], a)?,
        b: Tensor::from_vec(&[n, 3, h, w], b)?,
        label: Tensor::from_vec(&[n, 1, h, w], label)?,
        ids: samples.iter().map(|s| s.id.clone()).collect(),
    })
}
