//! Binary checkpoint format:
//!
//! ```text
//! "MINSCKPT"  u32 version  u32 meta_len  meta (JSON)
//! u32 tensor_count
//! per tensor: u32 name_len  name  u32 rank  u64 dims[rank]  f64 values[Π dims]
//! ```
//!
//! All integers and floats are little-endian. Model tensors come first in
//! enumeration order, followed by `optimizer/...` state when present.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::Optimizer;
use crate::data::Vocabularies;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};

pub const MAGIC: &[u8; 8] = b"MINSCKPT";
pub const VERSION: u32 = 1;

/// Everything besides tensors needed to rebuild and feed the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub vocabs: Vocabularies,
    pub title_len: usize,
    pub abstract_len: usize,
    pub history_len: usize,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ModelParams,
    pub optimizer: Option<Optimizer>,
}

fn encode(meta: &CheckpointMeta, tensors: &[(&str, &Tensor)]) -> Vec<u8> {
    let json = serde_json::to_vec(meta).expect("checkpoint metadata serializes");
    let mut out = Vec::with_capacity(16 + json.len() + tensors.iter().map(|(_, t)| 8 * t.numel() + 64).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
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

pub fn save_checkpoint(path: impl AsRef<Path>, meta: &CheckpointMeta, params: &ModelParams, optimizer: Option<&Optimizer>) -> Result<()> {
    let path = path.as_ref();
    let state = optimizer.map(|o| o.state_tensors(params)).unwrap_or_default();
    let mut tensors: Vec<(&str, &Tensor)> = params.names().iter().map(String::as_str).zip(params.tensors()).collect();
    tensors.extend(state.iter().map(|(n, t)| (n.as_str(), t)));
    fs::write(path, encode(meta, &tensors)).map_err(|e| Error::io(path, e))
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Load(format!("checkpoint truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

fn decode(buf: &[u8]) -> Result<(CheckpointMeta, Vec<(String, Tensor)>)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Load("not a checkpoint file (bad magic bytes)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Load(format!("checkpoint format version {version}, expected {VERSION}")));
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .map_err(|e| Error::Load(format!("checkpoint metadata: {e}")))?;
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let len = r.u32("tensor name length")? as usize;
        let name = String::from_utf8(r.take(len, "tensor name")?.to_vec())
            .map_err(|_| Error::Load("tensor name is not UTF-8".into()))?;
        let rank = r.u32("tensor rank")? as usize;
        let shape = (0..rank).map(|_| r.u64("tensor dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Load(format!("{name}: shape overflow")))?;
        let bytes = r.take(numel.checked_mul(8).ok_or_else(|| Error::Load(format!("{name}: shape overflow")))?, &name)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(Error::Load(format!("{} trailing bytes after the last tensor", buf.len() - r.pos)));
    }
    Ok((meta, tensors))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (meta, mut tensors) = decode(&buf)?;
    let state = tensors.split_off(tensors.iter().position(|(n, _)| n.starts_with("optimizer/")).unwrap_or(tensors.len()));
    let params = ModelParams::from_named(&meta.model, tensors)?;
    let optimizer = if state.is_empty() { None } else { Some(Optimizer::from_state(&params, &state)?) };
    Ok(Checkpoint { meta, params, optimizer })
}

/// Loads a checkpoint and rejects it if its architecture differs from `expected`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    ckpt.meta.model.check_architecture(expected)?;
    Ok(ckpt)
}
