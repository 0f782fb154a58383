//! Synthetic bi-temporal pairs: textured ground with rectangular buildings
//! that appear, vanish or persist, under per-epoch illumination changes and
//! sub-pixel-scale registration jitter of the second image.

use std::path::Path;

use image::{GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub size: usize,
    /// Inclusive range of buildings per scene.
    pub buildings: [usize; 2],
    /// Inclusive range of the per-epoch gamma.
    pub gamma: [f64; 2],
    /// Maximum shift of the second image, in pixels.
    pub jitter: usize,
    pub seed: u64,
    pub texture_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { size: 64, buildings: [2, 6], gamma: [0.7, 1.3], jitter: 1, seed: 17, texture_seed: 29 }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.size < 8 {
            return fail(format!("synthetic size {} is below 8", self.size));
        }
        if self.buildings[0] > self.buildings[1] {
            return fail(format!("building range {:?} is empty", self.buildings));
        }
        if !(self.gamma[0] > 0.0 && self.gamma[0] <= self.gamma[1]) {
            return fail(format!("gamma range {:?} is invalid", self.gamma));
        }
        if self.jitter > 1 {
            return fail(format!("jitter {} exceeds one pixel", self.jitter));
        }
        Ok(())
    }

    fn rng(seed: u64, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        rng
    }

    /// The scene layout and nuisance draws for pair `index`.
    pub fn scene(&self, index: u64) -> Scene {
        let mut rng = Self::rng(self.seed, index);
        let s = self.size;
        let count = rng.random_range(self.buildings[0]..=self.buildings[1]);
        let (lo, hi) = ((s / 10).max(3), (s / 4).max(4));
        let buildings = (0..count)
            .map(|_| {
                let w = rng.random_range(lo..=hi);
                let h = rng.random_range(lo..=hi);
                let x = rng.random_range(0..=s - w);
                let y = rng.random_range(0..=s - h);
                let dark = rng.random_bool(0.2);
                let color = std::array::from_fn(|_| if dark { rng.random_range(0.05..0.2) } else { rng.random_range(0.6..0.95) });
                let presence = match rng.random_range(0..10) {
                    0..=3 => Presence::Both,
                    4..=6 => Presence::OnlyA,
                    _ => Presence::OnlyB,
                };
                Building { x, y, w, h, color, presence }
            })
            .collect();
        let j = self.jitter as i64;
        Scene {
            buildings,
            gamma: [rng.random_range(self.gamma[0]..=self.gamma[1]), rng.random_range(self.gamma[0]..=self.gamma[1])],
            shift: [rng.random_range(-j..=j), rng.random_range(-j..=j)],
            index,
        }
    }

    /// Ground texture shared by both epochs, `[3, size, size]`.
    fn ground(&self, index: u64) -> Vec<f32> {
        let mut rng = Self::rng(self.texture_seed, index);
        let s = self.size;
        const GRID: usize = 5;
        let mut out = vec![0f32; 3 * s * s];
        for c in 0..3 {
            let base: f32 = rng.random_range(0.25..0.5);
            let coarse: Vec<f32> = (0..GRID * GRID).map(|_| rng.random_range(-0.08..0.08)).collect();
            for y in 0..s {
                let fy = y as f32 / (s - 1) as f32 * (GRID - 1) as f32;
                let (y0, ty) = ((fy as usize).min(GRID - 2), fy - (fy as usize).min(GRID - 2) as f32);
                for x in 0..s {
                    let fx = x as f32 / (s - 1) as f32 * (GRID - 1) as f32;
                    let (x0, tx) = ((fx as usize).min(GRID - 2), fx - (fx as usize).min(GRID - 2) as f32);
                    let at = |i: usize, j: usize| coarse[i * GRID + j];
                    let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
                    let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
                    let fine: f32 = rng.random_range(-0.02..0.02);
                    out[(c * s + y) * s + x] = base + top * (1.0 - ty) + bottom * ty + fine;
                }
            }
        }
        out
    }

    pub fn generate(&self, index: u64) -> Pair {
        self.render(&self.scene(index))
    }

    /// Rasterizes a scene. Labels mark the symmetric difference of the two
    /// epochs' footprints in unshifted coordinates.
    pub fn render(&self, scene: &Scene) -> Pair {
        let s = self.size;
        let ground = self.ground(scene.index);
        let footprint = |epoch: usize| {
            let mut m = vec![false; s * s];
            for b in scene.buildings.iter().filter(|b| b.present(epoch)) {
                for y in b.y..b.y + b.h {
                    m[y * s + b.x..y * s + b.x + b.w].fill(true);
                }
            }
            m
        };
        let image = |epoch: usize| {
            let (dx, dy) = if epoch == 1 { (scene.shift[0], scene.shift[1]) } else { (0, 0) };
            let gamma = scene.gamma[epoch] as f32;
            let mut img = vec![0u8; 3 * s * s];
            for y in 0..s {
                let sy = (y as i64 - dy).clamp(0, s as i64 - 1) as usize;
                for x in 0..s {
                    let sx = (x as i64 - dx).clamp(0, s as i64 - 1) as usize;
                    let roof = scene.buildings.iter().rev().find(|b| b.present(epoch) && b.contains(sx, sy));
                    for c in 0..3 {
                        let v = roof.map_or(ground[(c * s + sy) * s + sx], |b| b.color[c]);
                        img[(y * s + x) * 3 + c] = (v.clamp(0.0, 1.0).powf(gamma) * 255.0).round() as u8;
                    }
                }
            }
            img
        };
        let (fa, fb) = (footprint(0), footprint(1));
        let label = fa.iter().zip(&fb).map(|(&a, &b)| if a != b { 255 } else { 0 }).collect();
        Pair { size: s, a: image(0), b: image(1), label }
    }

    /// Writes pairs `start..start+n` as `<out>/{A,B,label}/<id>.png`.
    pub fn write(&self, out: &Path, start: u64, n: u64) -> Result<Vec<String>> {
        for sub in ["A", "B", "label"] {
            let dir = out.join(sub);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        }
        (start..start + n)
            .map(|i| {
                let id = pair_id(i);
                let pair = self.generate(i);
                pair.save(out, &id)?;
                Ok(id)
            })
            .collect()
    }
}

pub fn pair_id(index: u64) -> String {
    format!("{index:05}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Presence {
    Both,
    OnlyA,
    OnlyB,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Building {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub color: [f32; 3],
    pub presence: Presence,
}

impl Building {
    fn present(&self, epoch: usize) -> bool {
        matches!((self.presence, epoch), (Presence::Both, _) | (Presence::OnlyA, 0) | (Presence::OnlyB, 1))
    }

    fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub buildings: Vec<Building>,
    pub gamma: [f64; 2],
    /// `(dx, dy)` applied to the second image.
    pub shift: [i64; 2],
    pub index: u64,
}

/// 8-bit images, RGB interleaved; label values are 0 or 255.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub size: usize,
    pub a: Vec<u8>,
    pub b: Vec<u8>,
    pub label: Vec<u8>,
}

impl Pair {
    pub fn save(&self, root: &Path, id: &str) -> Result<()> {
        let s = self.size as u32;
        let file = |sub: &str| root.join(sub).join(format!("{id}.png"));
        let save_err = |p: &Path, e: image::ImageError| Error::data(p, e.to_string());
        let (pa, pb, pl) = (file("A"), file("B"), file("label"));
        RgbImage::from_raw(s, s, self.a.clone()).expect("sized").save(&pa).map_err(|e| save_err(&pa, e))?;
        RgbImage::from_raw(s, s, self.b.clone()).expect("sized").save(&pb).map_err(|e| save_err(&pb, e))?;
        GrayImage::from_raw(s, s, self.label.clone()).expect("sized").save(&pl).map_err(|e| save_err(&pl, e))?;
        Ok(())
    }
}
