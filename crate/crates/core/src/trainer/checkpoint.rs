//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!   magic "GATN"
//!   u32 version = 1
//!   u32 config_len, config JSON bytes (canonical struct field order)
//!   u32 tensor_count, then per tensor:
//!     u32 name_len, name bytes, u32 rank, u64 extents..., f32 data
//!   u32 rng_len, RNG state blob (seed, word position, stream)
//!
//! A loaded checkpoint continues the training trajectory bit-for-bit.

use super::{TrainConfig, Trainer};
use crate::diffcore::{PTensor, ParamSet};
use crate::error::{Error, Result};
use crate::field::{Ablation, FieldConfig, LatentTable, Model};
use crate::renderer::RenderConfig;
use crate::trainer::adam::{AdamState, Moments};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"GATN";
pub const VERSION: u32 = 1;

/// Everything needed to reconstruct the trainer besides tensor payloads.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub iteration: u64,
    pub adam_step: u64,
    pub precision: String,
    pub init_scheme: String,
    pub ablation: Ablation,
    pub train_frames: usize,
    pub field: FieldConfig,
    pub render: RenderConfig,
    pub train: TrainConfig,
}

pub const INIT_SCHEME: &str =
    "linear: uniform(+-sqrt(1/fan_in)), bias 0; layernorm gain 1 bias 0; latent normal(0, 0.01)";

struct Writer<W: Write> {
    out: W,
}

impl<W: Write> Writer<W> {
    fn u32(&mut self, v: u32) -> Result<()> {
        self.out.write_all(&v.to_le_bytes()).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    fn u64(&mut self, v: u64) -> Result<()> {
        self.out.write_all(&v.to_le_bytes()).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.out.write_all(b).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    fn tensor(&mut self, name: &str, shape: &[usize], data: &[f32]) -> Result<()> {
        self.u32(name.len() as u32)?;
        self.bytes(name.as_bytes())?;
        self.u32(shape.len() as u32)?;
        for &e in shape {
            self.u64(e as u64)?;
        }
        for &v in data {
            self.bytes(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f32>)> {
        let name_len = self.u32()? as usize;
        let name = String::from_utf8(self.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = self.take(n * 4)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok((name, shape, data))
    }
}

/// Serialize the master RNG state (seed, word position, stream).
fn rng_blob(rng: &ChaCha8Rng) -> Vec<u8> {
    let mut out = Vec::with_capacity(56);
    out.extend_from_slice(&rng.get_seed());
    out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    out.extend_from_slice(&rng.get_stream().to_le_bytes());
    out
}

fn rng_from_blob(blob: &[u8]) -> Result<ChaCha8Rng> {
    if blob.len() != 56 {
        return Err(Error::Checkpoint(format!("rng blob has {} bytes, expected 56", blob.len())));
    }
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&blob[..32]);
    let word_pos = u128::from_le_bytes(blob[32..48].try_into().unwrap());
    let stream = u64::from_le_bytes(blob[48..56].try_into().unwrap());
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    Ok(rng)
}

pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        iteration: trainer.iteration,
        adam_step: trainer.adam.step,
        precision: "f32".into(),
        init_scheme: INIT_SCHEME.into(),
        ablation: trainer.model.ablation,
        train_frames: trainer.model.latent.frames(),
        field: trainer.model.cfg,
        render: trainer.rcfg,
        train: trainer.tcfg.clone(),
    };
    let config = serde_json::to_vec(&meta)?;

    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = Writer { out: &mut file };
    w.bytes(MAGIC)?;
    w.u32(VERSION)?;
    w.u32(config.len() as u32)?;
    w.bytes(&config)?;

    let n_params = trainer.model.params.len();
    // params, latent, then optimizer moments in the same canonical order
    w.u32((n_params + 1) as u32 * 3)?;
    for (name, t) in trainer.model.params.iter() {
        w.tensor(name, &t.shape, &t.data)?;
    }
    w.tensor("latent.codes", &trainer.model.latent.codes.shape, &trainer.model.latent.codes.data)?;
    for (i, (name, t)) in trainer.model.params.iter().enumerate() {
        w.tensor(&format!("adam.m.{name}"), &t.shape, &trainer.adam.entries[i].m)?;
        w.tensor(&format!("adam.v.{name}"), &t.shape, &trainer.adam.entries[i].v)?;
    }
    let lat_shape = &trainer.model.latent.codes.shape;
    w.tensor("adam.m.latent.codes", lat_shape, &trainer.adam.entries[n_params].m)?;
    w.tensor("adam.v.latent.codes", lat_shape, &trainer.adam.entries[n_params].v)?;

    let blob = rng_blob(&trainer.rng);
    w.u32(blob.len() as u32)?;
    w.bytes(&blob)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader { buf: &buf, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let config_len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(config_len)?)?;

    let n_tensors = r.u32()? as usize;
    let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        tensors.push(r.tensor()?);
    }
    let rng_len = r.u32()? as usize;
    let rng = rng_from_blob(r.take(rng_len)?)?;

    // rebuild the canonical parameter order from a fresh init, then overwrite
    let reference = Model::<f32>::init(&meta.field, meta.train_frames, meta.ablation, meta.train.seed)?;
    let mut by_name: std::collections::HashMap<String, (Vec<usize>, Vec<f32>)> =
        tensors.into_iter().map(|(n, s, d)| (n, (s, d))).collect();
    let mut take = |name: &str, want_shape: &[usize]| -> Result<Vec<f32>> {
        let (shape, data) = by_name
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if shape != want_shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {shape:?}, config implies {want_shape:?}"
            )));
        }
        Ok(data)
    };

    let mut params = ParamSet::new();
    for (name, t) in reference.params.iter() {
        let data = take(name, &t.shape)?;
        params.insert(name, PTensor::new(data, &t.shape));
    }
    let lat_shape = reference.latent.codes.shape.clone();
    let latent = LatentTable { codes: PTensor::new(take("latent.codes", &lat_shape)?, &lat_shape) };

    let mut entries = Vec::with_capacity(params.len() + 1);
    for (name, t) in params.iter() {
        entries.push(Moments {
            m: take(&format!("adam.m.{name}"), &t.shape)?,
            v: take(&format!("adam.v.{name}"), &t.shape)?,
        });
    }
    entries.push(Moments {
        m: take("adam.m.latent.codes", &lat_shape)?,
        v: take("adam.v.latent.codes", &lat_shape)?,
    });

    let model = Model { cfg: meta.field, ablation: meta.ablation, params, latent };
    Ok(Trainer {
        model,
        adam: AdamState { step: meta.adam_step, entries },
        rcfg: meta.render,
        tcfg: meta.train,
        iteration: meta.iteration,
        rng,
    })
}
