//! Single-file checkpoints.
//!
//! Layout, integers little-endian:
//!
//! ```text
//! magic     8 bytes  "DTRVCKPT"
//! version   u32
//! meta_len  u64, then meta_len bytes of UTF-8 TOML (config, epoch, rng, metrics)
//! count     u32, then `count` tensor records:
//!   name_len u32, name bytes, dtype u8 (1 = f64), rank u32,
//!   extents  rank × u64, payload product(extents) × f64
//! ```
//!
//! Tensor names are `param/<name>`, `velocity/<name>`, `stats/<name>/mean`
//! and `stats/<name>/var`.

use std::collections::HashMap;
use std::path::Path;

use deeptraverse_core::train::OptimState;
use deeptraverse_core::{Model, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ConfigFile;
use crate::error::{read, AppError, Result};

pub const MAGIC: &[u8; 8] = b"DTRVCKPT";
pub const VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 1;

/// One row of the per-epoch history; test columns are fractions in [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_top1: f64,
    pub test_top5: f64,
}

/// Position of a ChaCha8 stream, enough to continue it exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte key, hex.
    pub seed: String,
    pub stream: u64,
    /// Decimal, since it exceeds the TOML integer range.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng, String> {
        use rand::SeedableRng;
        if self.seed.len() != 64 || !self.seed.is_ascii() {
            return Err("rng seed must be 64 hex digits".into());
        }
        let mut key = [0u8; 32];
        for (i, k) in key.iter_mut().enumerate() {
            *k = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|e| format!("rng seed: {e}"))?;
        }
        let pos: u128 = self.word_pos.parse().map_err(|e| format!("rng word_pos: {e}"))?;
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// The textual metadata block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub rng: RngState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
    pub config: ConfigFile,
    #[serde(default)]
    pub metric: Vec<MetricRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: Metadata,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Snapshot of a model, its optimizer and the training stream.
    pub fn capture(meta: Metadata, model: &Model, optim: &OptimState) -> Self {
        let mut tensors = Vec::new();
        for (_, p) in model.params.iter() {
            tensors.push((format!("param/{}", p.name), p.value.clone()));
        }
        for s in model.stats.iter() {
            tensors.push((format!("stats/{}/mean", s.name), s.mean.clone()));
            tensors.push((format!("stats/{}/var", s.name), s.var.clone()));
        }
        for ((_, p), v) in model.params.iter().zip(&optim.velocity) {
            tensors.push((format!("velocity/{}", p.name), v.clone()));
        }
        Checkpoint { meta, tensors }
    }

    pub fn encode(&self) -> Vec<u8> {
        let meta = toml::to_string(&self.meta).expect("metadata serialises");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, at: 0, path };
        if r.take(8, "magic")? != MAGIC {
            return Err(AppError::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(AppError::format(path, format!("checkpoint version {version}, expected {VERSION}")));
        }
        let meta_len = r.u64("metadata length")?;
        let meta_bytes = r.take(usize::try_from(meta_len).unwrap_or(usize::MAX), "metadata")?;
        let meta_text =
            std::str::from_utf8(meta_bytes).map_err(|_| AppError::format(path, "metadata block is not UTF-8"))?;
        let meta: Metadata =
            toml::from_str(meta_text).map_err(|e| AppError::format(path, format!("metadata: {e}")))?;
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = r.u32("tensor name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| AppError::format(path, "tensor name is not UTF-8"))?
                .to_string();
            let what = |field: &str| format!("{field} of tensor {name}");
            let dtype = r.take(1, &what("dtype"))?[0];
            if dtype != DTYPE_F64 {
                return Err(AppError::format(path, format!("tensor {name} has unsupported dtype tag {dtype}")));
            }
            let rank = r.u32(&what("rank"))? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64(&what("extent"))?).unwrap_or(usize::MAX));
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let bytes_needed = numel.and_then(|n| n.checked_mul(8)).unwrap_or(usize::MAX);
            let payload = r.take(bytes_needed, &what("payload"))?;
            let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes"))).collect();
            let t = Tensor::from_vec(&shape, data).map_err(|e| AppError::format(path, format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        if r.at != bytes.len() {
            return Err(AppError::format(path, format!("{} trailing bytes after the last tensor", bytes.len() - r.at)));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write then rename, so a crash never leaves a half-written checkpoint under the final name
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.encode()).map_err(|e| AppError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| AppError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read(path)?, path)
    }

    /// Copies parameters and running statistics into `model`, and momentum
    /// buffers into `optim` when given. Every tensor the model owns must be
    /// present with the same shape, and the checkpoint may hold nothing else.
    /// Nothing is modified unless all checks pass.
    pub fn restore(&self, model: &mut Model, optim: Option<&mut OptimState>, path: &Path) -> Result<()> {
        let mut by_name: HashMap<&str, &Tensor> = HashMap::new();
        for (name, t) in &self.tensors {
            if by_name.insert(name.as_str(), t).is_some() {
                return Err(AppError::format(path, format!("tensor {name} appears twice")));
            }
        }
        let mut expected: Vec<(String, &Tensor)> = Vec::new();
        for (_, p) in model.params.iter() {
            expected.push((format!("param/{}", p.name), &p.value));
            expected.push((format!("velocity/{}", p.name), &p.value));
        }
        for s in model.stats.iter() {
            expected.push((format!("stats/{}/mean", s.name), &s.mean));
            expected.push((format!("stats/{}/var", s.name), &s.var));
        }
        for (name, like) in &expected {
            let t = by_name.get(name.as_str()).ok_or_else(|| AppError::format(path, format!("tensor {name} is missing")))?;
            if t.shape() != like.shape() {
                return Err(AppError::format(
                    path,
                    format!("tensor {name} has shape {:?}, the model expects {:?}", t.shape(), like.shape()),
                ));
            }
        }
        if by_name.len() != expected.len() {
            let known: std::collections::HashSet<&str> = expected.iter().map(|(n, _)| n.as_str()).collect();
            let extra = self.tensors.iter().find(|(n, _)| !known.contains(n.as_str())).map_or("?", |(n, _)| n.as_str());
            return Err(AppError::format(path, format!("tensor {extra} does not belong to this model")));
        }

        for (_, p) in model.params.iter_mut() {
            p.value = by_name[format!("param/{}", p.name).as_str()].clone();
        }
        for s in model.stats.iter_mut() {
            s.mean = by_name[format!("stats/{}/mean", s.name).as_str()].clone();
            s.var = by_name[format!("stats/{}/var", s.name).as_str()].clone();
        }
        if let Some(optim) = optim {
            optim.velocity =
                model.params.iter().map(|(_, p)| by_name[format!("velocity/{}", p.name).as_str()].clone()).collect();
            optim.epoch = self.meta.epoch;
            optim.step = self.meta.step;
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let left = self.bytes.len() - self.at;
        if n > left {
            return Err(AppError::format(
                self.path,
                format!("truncated: {what} needs {n} bytes at offset {}, {left} remain", self.at),
            ));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("eight bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};

    #[test]
    fn rng_state_round_trips_mid_stream() {
        let mut a = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..13 {
            a.next_u32();
        }
        let mut b = RngState::capture(&a).restore().unwrap();
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let p = Path::new("x.ckpt");
        let err = Checkpoint::decode(b"NOTACKPT\x01\0\0\0", p).unwrap_err();
        assert!(err.to_string().contains("magic"));
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&7u32.to_le_bytes());
        assert!(Checkpoint::decode(&bytes, p).unwrap_err().to_string().contains("version 7"));
        assert!(Checkpoint::decode(b"DTRV", p).unwrap_err().to_string().contains("truncated"));
    }
}
