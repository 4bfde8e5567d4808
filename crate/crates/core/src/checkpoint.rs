//! Versioned binary checkpoints: a JSON header followed by named
//! little-endian `f64` tensors. Optimizer moments are stored as
//! `opt.m.<name>` / `opt.v.<name>` when present.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{HeroModel, ModelConfig};
use crate::error::{HeroError, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"HEROCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHeader {
    pub config: AdamWConfig,
    pub step: u64,
    pub update_counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    /// Training steps completed when the checkpoint was written.
    pub step: usize,
    pub optimizer: Option<OptimizerHeader>,
    /// Free-form run metadata (task weights, seed, paths).
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: HeroModel,
    pub optimizer: Option<AdamW>,
}

fn put_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, x: u64) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Serializes the model and, optionally, optimizer state.
pub fn encode(model: &HeroModel, optimizer: Option<&AdamW>, step: usize, meta: serde_json::Value) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        model: model.config.clone(),
        step,
        optimizer: optimizer.map(|o| OptimizerHeader {
            config: o.config,
            step: o.step_count(),
            update_counts: o.update_counts().to_vec(),
        }),
        meta,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u64(&mut out, json.len() as u64);
    out.extend_from_slice(&json);
    let count = model.store.len() * if optimizer.is_some() { 3 } else { 1 };
    put_u64(&mut out, count as u64);
    for (_, name, t) in model.store.iter() {
        put_tensor(&mut out, name, t);
    }
    if let Some(o) = optimizer {
        let (m, v) = o.moments();
        for ((_, name, _), t) in model.store.iter().zip(m) {
            put_tensor(&mut out, &format!("opt.m.{name}"), t);
        }
        for ((_, name, _), t) in model.store.iter().zip(v) {
            put_tensor(&mut out, &format!("opt.v.{name}"), t);
        }
    }
    Ok(out)
}

struct Reader<'a>(Cursor<&'a [u8]>);

impl Reader<'_> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let remaining = self.0.get_ref().len() - self.0.position() as usize;
        if n > remaining {
            return Err(HeroError::Checkpoint("truncated checkpoint".into()));
        }
        let mut buf = vec![0; n];
        self.0.read_exact(&mut buf)?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.bytes(n)?)
            .map_err(|_| HeroError::Checkpoint("tensor name is not UTF-8".into()))?;
        let ndim = self.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64()? as usize);
        }
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let len = len.ok_or_else(|| HeroError::Checkpoint(format!("tensor {name} is too large")))?;
        let raw = self.bytes(len.checked_mul(8).unwrap_or(usize::MAX))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

/// Parses bytes written by [`encode`], rebuilding the model from its config.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader(Cursor::new(bytes));
    if r.bytes(8).ok().as_deref() != Some(MAGIC.as_slice()) {
        return Err(HeroError::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(HeroError::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let hlen = r.u64()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(&r.bytes(hlen)?)?;
    header.model.validate()?;
    let count = r.u64()? as usize;
    let mut tensors = ParamStore::new();
    for _ in 0..count {
        let (name, t) = r.tensor()?;
        if tensors.id(&name).is_some() {
            return Err(HeroError::Checkpoint(format!("duplicate tensor {name}")));
        }
        tensors.add(name, t);
    }
    let mut model = HeroModel::new(header.model.clone(), 0)?;
    model.store.load_from(&tensors)?;
    let optimizer = match &header.optimizer {
        None => None,
        Some(oh) => {
            let mut opt = AdamW::new(oh.config, &model.store)?;
            let mut m = Vec::with_capacity(model.store.len());
            let mut v = Vec::with_capacity(model.store.len());
            for (_, name, _) in model.store.iter() {
                for (prefix, out) in [("opt.m", &mut m), ("opt.v", &mut v)] {
                    let key = format!("{prefix}.{name}");
                    let id = tensors
                        .id(&key)
                        .ok_or_else(|| HeroError::Checkpoint(format!("missing optimizer tensor {key}")))?;
                    out.push(tensors.get(id).clone());
                }
            }
            opt.restore(oh.step, m, v, oh.update_counts.clone())?;
            Some(opt)
        }
    };
    Ok(Checkpoint {
        header,
        model,
        optimizer,
    })
}

/// Writes atomically through a temporary sibling file.
pub fn save(path: &Path, model: &HeroModel, optimizer: Option<&AdamW>, step: usize, meta: serde_json::Value) -> Result<()> {
    let bytes = encode(model, optimizer, step, meta)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)
        .map_err(|e| HeroError::Checkpoint(format!("cannot read checkpoint {}: {e}", path.display())))?;
    decode(&bytes)
}
