//! Geometric augmentation applied identically to both images and the label.

use rand::Rng;

use crate::config::AugmentConfig;
use crate::data::Sample;
use crate::error::{Error, Result};

fn map_planes(data: &[f32], planes: usize, h: usize, w: usize, out_h: usize, out_w: usize, src: impl Fn(usize, usize) -> usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    for p in 0..planes {
        let plane = &data[p * h * w..(p + 1) * h * w];
        for y in 0..out_h {
            for x in 0..out_w {
                out.push(plane[src(y, x)]);
            }
        }
    }
    out
}

fn remap(s: &Sample, out_h: usize, out_w: usize, src: impl Fn(usize, usize) -> usize + Copy) -> Sample {
    Sample {
        id: s.id.clone(),
        h: out_h,
        w: out_w,
        a: map_planes(&s.a, 3, s.h, s.w, out_h, out_w, src),
        b: map_planes(&s.b, 3, s.h, s.w, out_h, out_w, src),
        label: map_planes(&s.label, 1, s.h, s.w, out_h, out_w, src),
    }
}

pub fn hflip(s: &Sample) -> Sample {
    let w = s.w;
    remap(s, s.h, s.w, move |y, x| y * w + (w - 1 - x))
}

pub fn vflip(s: &Sample) -> Sample {
    let (h, w) = (s.h, s.w);
    remap(s, h, w, move |y, x| (h - 1 - y) * w + x)
}

/// Counter-clockwise by 90 degrees.
pub fn rot90(s: &Sample) -> Sample {
    let w = s.w;
    // output (y, x) reads input (x, w - 1 - y)
    remap(s, s.w, s.h, move |y, x| x * w + (w - 1 - y))
}

pub fn crop(s: &Sample, top: usize, left: usize, size: usize) -> Result<Sample> {
    if top + size > s.h || left + size > s.w {
        return Err(Error::Config(format!("crop {size} at ({top},{left}) exceeds {}x{} ({})", s.h, s.w, s.id)));
    }
    let w = s.w;
    Ok(remap(s, size, size, move |y, x| (top + y) * w + left + x))
}

/// A crop to `patch` (random, or centered when random crops are off), then
/// random flips and quarter turns.
pub fn augment<R: Rng + ?Sized>(s: &Sample, cfg: &AugmentConfig, patch: usize, rng: &mut R) -> Result<Sample> {
    if s.h < patch || s.w < patch {
        return Err(Error::Config(format!("sample {} is {}x{}, smaller than patch {patch}", s.id, s.h, s.w)));
    }
    let mut out = if cfg.crop {
        let top = rng.random_range(0..=s.h - patch);
        let left = rng.random_range(0..=s.w - patch);
        crop(s, top, left, patch)?
    } else if s.h != patch || s.w != patch {
        crop(s, (s.h - patch) / 2, (s.w - patch) / 2, patch)?
    } else {
        s.clone()
    };
    if cfg.hflip && rng.random_bool(0.5) {
        out = hflip(&out);
    }
    if cfg.vflip && rng.random_bool(0.5) {
        out = vflip(&out);
    }
    if cfg.rotate {
        for _ in 0..rng.random_range(0..4) {
            out = rot90(&out);
        }
    }
    Ok(out)
}
