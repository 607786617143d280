//! Binary checkpoint container.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "D3DCKPT1"            8-byte magic
//! version
//! tensor count T
//! T × tensor            parameters, sorted by name
//! 3 × tensor            bank, assignments, prototypes
//! config length L
//! L bytes               UTF-8 key=value lines
//! ```
//!
//! A tensor is `name length, name bytes, rank, dims…, f32 data` in
//! row-major order. Assignments are stored as f32 cluster ids.

use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};

use crate::clustering::MemoryBank;
use crate::error::{Error, Result};
use crate::geometry::ShapeId;
use crate::pipeline::{Checkpoint, TrainConfig, CHECKPOINT_VERSION};
use crate::tensor::{ModelParameters, Tensor};

use super::write_atomic;

pub const MAGIC: &[u8; 8] = b"D3DCKPT1";

const BANK: &str = "bank.features";
const ASSIGNMENTS: &str = "bank.assignments";
const PROTOTYPES: &str = "bank.prototypes";
const MAX_RANK: u32 = 8;

const KEY_SEED: &str = "checkpoint.seed";
const KEY_EPOCH: &str = "checkpoint.epoch";
const KEY_CLUSTERS: &str = "bank.clusters";
const KEY_BANK_EPOCH: &str = "bank.epoch";
const KEY_IDS: &str = "bank.shape_ids";

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{v} does not fit the checkpoint format")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: impl Iterator<Item = f32>) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len())?;
    for &d in shape {
        put_u32(out, d)?;
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

/// Serializes a checkpoint to bytes.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let bank = &ckpt.bank;
    for id in &bank.shape_ids {
        if id.0.contains(['\t', '\n', '\r']) {
            return Err(Error::invalid(format!("shape id `{}` contains a tab or newline", id.0)));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, ckpt.version as usize)?;
    put_u32(&mut out, ckpt.params.tensors.len())?;
    for (name, t) in &ckpt.params.tensors {
        put_tensor(&mut out, name, t.shape(), t.iter().copied())?;
    }
    put_tensor(&mut out, BANK, bank.bank.shape(), bank.bank.iter().map(|&v| v as f32))?;
    put_tensor(&mut out, ASSIGNMENTS, &[bank.assignments.len()], bank.assignments.iter().map(|&v| v as f32))?;
    put_tensor(&mut out, PROTOTYPES, bank.prototypes.shape(), bank.prototypes.iter().map(|&v| v as f32))?;

    let mut pairs = ckpt.config.to_pairs();
    pairs.push((KEY_SEED.into(), ckpt.seed.to_string()));
    pairs.push((KEY_EPOCH.into(), ckpt.epoch.to_string()));
    pairs.push((KEY_CLUSTERS.into(), bank.c.to_string()));
    pairs.push((KEY_BANK_EPOCH.into(), bank.epoch.to_string()));
    let ids: Vec<&str> = bank.shape_ids.iter().map(|s| s.0.as_str()).collect();
    pairs.push((KEY_IDS.into(), ids.join("\t")));
    let text: String = pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    put_u32(&mut out, text.len())?;
    out.extend_from_slice(text.as_bytes());
    Ok(out)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    write_atomic(path, |w| w.write_all(&bytes))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn fail(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Checkpoint {
            path: self.path.to_string(),
            offset: offset as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let left = self.bytes.len() - self.pos;
        if n > left {
            return Err(self.fail(self.pos, format!("truncated {what}: need {n} bytes, {left} left")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let start = self.pos;
        let len = self.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(self.take(len, "tensor name")?)
            .map_err(|_| self.fail(start + 4, "tensor name is not UTF-8"))?
            .to_string();
        let rank_at = self.pos;
        let rank = self.u32("tensor rank")?;
        if rank > MAX_RANK {
            return Err(self.fail(rank_at, format!("tensor `{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(self.u32("tensor dimension")? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|c| c.checked_mul(4).is_some_and(|b| b <= self.bytes.len() - self.pos))
            .ok_or_else(|| self.fail(self.pos, format!("truncated tensor `{name}`: shape {shape:?} needs more bytes than remain")))?;
        let raw = self.take(count * 4, "tensor data")?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let t = ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|e| self.fail(start, e.to_string()))?;
        Ok((name, t))
    }

    fn named(&mut self, expected: &str) -> Result<Tensor<f32>> {
        let at = self.pos;
        let (name, t) = self.tensor()?;
        if name != expected {
            return Err(self.fail(at, format!("expected tensor `{expected}`, found `{name}`")));
        }
        Ok(t)
    }
}

fn matrix(t: Tensor<f32>, r: &Reader, at: usize, name: &str) -> Result<Array2<f64>> {
    t.into_dimensionality()
        .map(|m| m.mapv(|v: f32| v as f64))
        .map_err(|_| r.fail(at, format!("`{name}` must be a matrix")))
}

/// Parses checkpoint bytes; `path` is used in error messages only.
pub fn decode_checkpoint(bytes: &[u8], path: &str) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8, "magic")? != MAGIC {
        return Err(r.fail(0, "bad magic"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(r.fail(8, format!("unsupported version {version} (expected {CHECKPOINT_VERSION})")));
    }
    let count = r.u32("tensor count")?;
    let mut params = ModelParameters::default();
    for _ in 0..count {
        let at = r.pos;
        let (name, t) = r.tensor()?;
        if params.contains(&name) {
            return Err(r.fail(at, format!("duplicate tensor `{name}`")));
        }
        params.insert(name, t);
    }
    let at = r.pos;
    let bank = matrix(r.named(BANK)?, &r, at, BANK)?;
    let at = r.pos;
    let assignments_t = r.named(ASSIGNMENTS)?;
    if assignments_t.ndim() != 1 {
        return Err(r.fail(at, "assignments must be a vector"));
    }
    let mut assignments = Vec::with_capacity(assignments_t.len());
    for &v in assignments_t.iter() {
        if !(v >= 0.0 && v.fract() == 0.0) {
            return Err(r.fail(at, format!("assignment {v} is not a cluster id")));
        }
        assignments.push(v as usize);
    }
    let at = r.pos;
    let prototypes = matrix(r.named(PROTOTYPES)?, &r, at, PROTOTYPES)?;

    let at = r.pos;
    let len = r.u32("config length")? as usize;
    let text = std::str::from_utf8(r.take(len, "config block")?).map_err(|_| r.fail(at + 4, "config block is not UTF-8"))?;
    if r.pos != bytes.len() {
        return Err(r.fail(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let mut config = TrainConfig::default();
    let (mut seed, mut epoch, mut c, mut bank_epoch, mut ids) = (None, None, None, None, None);
    let bad = |key: &str, v: &str| r.fail(at + 4, format!("config `{key}`: cannot parse `{v}`"));
    for line in text.lines() {
        let Some((k, v)) = line.split_once('=') else {
            return Err(r.fail(at + 4, format!("config line without `=`: `{line}`")));
        };
        match k {
            KEY_SEED => seed = Some(v.parse::<u64>().map_err(|_| bad(k, v))?),
            KEY_EPOCH => epoch = Some(v.parse::<u64>().map_err(|_| bad(k, v))?),
            KEY_CLUSTERS => c = Some(v.parse::<usize>().map_err(|_| bad(k, v))?),
            KEY_BANK_EPOCH => bank_epoch = Some(v.parse::<u64>().map_err(|_| bad(k, v))?),
            KEY_IDS => {
                ids = Some(if v.is_empty() {
                    Vec::new()
                } else {
                    v.split('\t').map(|s| ShapeId(s.to_string())).collect()
                })
            }
            _ => config.set(k, v).map_err(|e| r.fail(at + 4, e.to_string()))?,
        }
    }
    let missing = |key: &str| r.fail(at + 4, format!("config block lacks `{key}`"));
    let ckpt = Checkpoint {
        version,
        config,
        params,
        bank: MemoryBank {
            shape_ids: ids.ok_or_else(|| missing(KEY_IDS))?,
            bank,
            assignments,
            prototypes,
            c: c.ok_or_else(|| missing(KEY_CLUSTERS))?,
            epoch: bank_epoch.ok_or_else(|| missing(KEY_BANK_EPOCH))?,
        },
        seed: seed.ok_or_else(|| missing(KEY_SEED))?,
        epoch: epoch.ok_or_else(|| missing(KEY_EPOCH))?,
    };
    ckpt.validate().map_err(|e| r.fail(0, e.to_string()))?;
    Ok(ckpt)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, &path.display().to_string())
}
