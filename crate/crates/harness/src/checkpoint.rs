//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//! `CDCK`, u32 version, u32 entry count, then per entry sorted by name:
//! u32 name length, name bytes, CDT1 value. The optimizer section follows
//! with u64 optimizer step and, per entry in the same order, CDT1 first and
//! second moments. Then u64 training step, the data RNG state (32-byte seed,
//! u64 stream, u128 word position), and the u32-length-prefixed config JSON.

use std::io::{Read, Write};
use std::path::Path;

use cdnet_core::{ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};

const MAGIC: &[u8; 4] = b"CDCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub value: Tensor<f32>,
    pub m: Tensor<f32>,
    pub v: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
    pub optimizer_step: u64,
    pub step: u64,
    pub rng: RngState,
    pub config_json: String,
}

impl Checkpoint {
    pub fn capture(store: &ParamStore<f32>, opt: &AdamW, step: u64, rng: &ChaCha8Rng, config_json: String) -> Result<Self> {
        let mut entries = Vec::with_capacity(store.len());
        for (k, (_, p)) in store.iter().enumerate() {
            let dims = p.value.dims();
            entries.push(Entry {
                name: p.name.clone(),
                value: p.value.clone(),
                m: Tensor::from_vec(dims, opt.m[k].clone())?,
                v: Tensor::from_vec(dims, opt.v[k].clone())?,
            });
        }
        entries.sort_by(|a, b| a.name.cmp(&b.name));
        Ok(Self { entries, optimizer_step: opt.step, step, rng: RngState::capture(rng), config_json })
    }

    /// Writes values into a store built from the same config and returns the
    /// matching optimizer state.
    pub fn restore(&self, store: &mut ParamStore<f32>, opt_config: AdamWConfig) -> Result<AdamW> {
        if self.entries.len() != store.len() {
            return Err(Error::Checkpoint(format!("{} entries for a model with {} parameters", self.entries.len(), store.len())));
        }
        let mut opt = AdamW::new(opt_config, store);
        opt.step = self.optimizer_step;
        for e in &self.entries {
            let id = store.id(&e.name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{}`", e.name)))?;
            store.set_value(id, e.value.clone()).map_err(|err| Error::Checkpoint(err.to_string()))?;
            opt.m[id.index()] = e.m.to_vec();
            opt.v[id.index()] = e.v.to_vec();
        }
        Ok(opt)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::io("checkpoint write", e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes()).map_err(io)?;
        for e in &self.entries {
            w.write_all(&(e.name.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(e.name.as_bytes()).map_err(io)?;
            e.value.write_cdt1(&mut w)?;
        }
        w.write_all(&self.optimizer_step.to_le_bytes()).map_err(io)?;
        for e in &self.entries {
            e.m.write_cdt1(&mut w)?;
            e.v.write_cdt1(&mut w)?;
        }
        w.write_all(&self.step.to_le_bytes()).map_err(io)?;
        w.write_all(&self.rng.seed).map_err(io)?;
        w.write_all(&self.rng.stream.to_le_bytes()).map_err(io)?;
        w.write_all(&self.rng.word_pos.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.config_json.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(self.config_json.as_bytes()).map_err(io)?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
            let mut buf = [0u8; N];
            r.read_exact(&mut buf).map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
            Ok(buf)
        }
        let u32_ = |r: &mut R| take::<4>(r).map(u32::from_le_bytes);
        let u64_ = |r: &mut R| take::<8>(r).map(u64::from_le_bytes);
        let string = |r: &mut R, len: usize| -> Result<String> {
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf).map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
            String::from_utf8(buf).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
        };
        if &take::<4>(&mut r)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32_(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = u32_(&mut r)? as usize;
        let mut named = Vec::with_capacity(count);
        for _ in 0..count {
            let len = u32_(&mut r)? as usize;
            let name = string(&mut r, len)?;
            named.push((name, Tensor::<f32>::read_cdt1(&mut r)?));
        }
        if named.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Checkpoint("entries are not sorted and unique".into()));
        }
        let optimizer_step = u64_(&mut r)?;
        let mut entries = Vec::with_capacity(count);
        for (name, value) in named {
            let m = Tensor::<f32>::read_cdt1(&mut r)?;
            let v = Tensor::<f32>::read_cdt1(&mut r)?;
            if m.dims() != value.dims() || v.dims() != value.dims() {
                return Err(Error::Checkpoint(format!("moment shapes differ from `{name}`")));
            }
            entries.push(Entry { name, value, m, v });
        }
        let step = u64_(&mut r)?;
        let seed = take::<32>(&mut r)?;
        let stream = u64_(&mut r)?;
        let word_pos = u128::from_le_bytes(take::<16>(&mut r)?);
        let len = u32_(&mut r)? as usize;
        let config_json = string(&mut r, len)?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|e| Error::io("checkpoint read", e))?;
        if !rest.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self { entries, optimizer_step, step, rng: RngState { seed, stream, word_pos }, config_json })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        Ok(buf)
    }

    /// Written to a temporary file and renamed, so a crash never leaves a
    /// partial checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(tmp.display().to_string(), e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::read(bytes.as_slice())
    }
}
