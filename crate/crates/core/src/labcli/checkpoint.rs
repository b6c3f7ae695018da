//! Binary model checkpoints.
//!
//! Layout (all integers little-endian): `"CSPL"`, `u32` version, `u8`
//! dtype tag, `u64` metadata length and metadata JSON, `u32` group count,
//! then per group: `u32` name length and name, `u8` trainable flag, `u32`
//! rank, `rank × u64` dims, payload, `u8` slot flag and optional Adam
//! moments. A SHA-256 of everything before it closes the file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codeclm::{CodecLm, LoraSettings, ModelConfig};
use crate::error::{Error, Result};
use crate::gradcore::{DType, ParamGroup, ParamStore, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"CSPL";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub config: serde_json::Value,
    pub model: ModelConfig,
    pub lora_rank: Option<usize>,
    pub lora_scale: Option<f64>,
    /// Optimizer steps taken.
    pub step: u64,
    pub seed: u64,
    /// Hash of the checkpoint this one was trained from.
    pub parent_hash: Option<String>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn put_tensor<R: Real>(out: &mut Vec<u8>, t: &Tensor<R>) {
    out.extend_from_slice(&t.le_bytes());
}

/// Serializes `model` (with optimizer slots) and returns the bytes and
/// their hash.
pub fn encode<R: Real>(model: &CodecLm<R>, meta: &CheckpointMeta) -> Result<(Vec<u8>, String)> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(R::DTYPE.tag());
    let json = serde_json::to_vec(meta)?;
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for g in model.params().iter() {
        out.extend_from_slice(&(g.name.len() as u32).to_le_bytes());
        out.extend_from_slice(g.name.as_bytes());
        out.push(u8::from(g.trainable));
        out.extend_from_slice(&(g.tensor.dims().len() as u32).to_le_bytes());
        for &d in g.tensor.dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        put_tensor(&mut out, &g.tensor);
        match &g.slots {
            Some((m, v)) => {
                out.push(1);
                put_tensor(&mut out, m);
                put_tensor(&mut out, v);
            }
            None => out.push(0),
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok((out, hex::encode(digest)))
}

pub fn save_checkpoint<R: Real>(model: &CodecLm<R>, meta: &CheckpointMeta, path: &Path) -> Result<String> {
    let (bytes, hash) = encode(model, meta)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(hash)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(bad("truncated file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor<R: Real>(&mut self, dims: &[usize]) -> Result<Tensor<R>> {
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("dims overflow"))?;
        let w = R::DTYPE.width();
        let bytes = self.take(n.checked_mul(w).ok_or_else(|| bad("dims overflow"))?)?;
        let data = bytes.chunks_exact(w).map(R::read_le).collect();
        Tensor::new(dims.to_vec(), data).map_err(|e| bad(e.to_string()))
    }
}

/// Parsed header without decoding the payload.
pub fn read_meta(path: &Path) -> Result<(CheckpointMeta, DType)> {
    let bytes = std::fs::read(path)?;
    let body = verify(&bytes)?;
    let mut r = Reader { buf: body, pos: 0 };
    header(&mut r)
}

fn verify(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    if bytes.len() < 4 + 4 + 1 + 8 + 32 {
        return Err(bad("truncated file"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(bad("checksum mismatch (corrupt or truncated file)"));
    }
    Ok(body)
}

fn header(r: &mut Reader<'_>) -> Result<(CheckpointMeta, DType)> {
    r.take(4)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!("format version {version}, expected {VERSION}")));
    }
    let dtype = DType::from_tag(r.u8()?).ok_or_else(|| bad("unknown dtype tag"))?;
    let len = r.u64()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(len)?).map_err(|e| bad(format!("metadata: {e}")))?;
    Ok((meta, dtype))
}

/// Loads a checkpoint stored at precision `R`, returning the model, its
/// metadata and the file hash.
pub fn load_checkpoint<R: Real>(path: &Path) -> Result<(CodecLm<R>, CheckpointMeta, String)> {
    let bytes = std::fs::read(path)?;
    let body = verify(&bytes)?;
    let hash = hex::encode(&bytes[bytes.len() - 32..]);
    let mut r = Reader { buf: body, pos: 0 };
    let (meta, dtype) = header(&mut r)?;
    if dtype != R::DTYPE {
        return Err(bad(format!("checkpoint holds {dtype:?} values, requested {:?}", R::DTYPE)));
    }
    let n = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..n {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| bad("group name is not UTF-8"))?;
        let trainable = r.u8()? != 0;
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let tensor = r.tensor::<R>(&dims)?;
        let slots = match r.u8()? {
            0 => None,
            1 => Some((r.tensor::<R>(&dims)?, r.tensor::<R>(&dims)?)),
            _ => return Err(bad("bad slot flag")),
        };
        let mut g = ParamGroup::new(name, tensor);
        g.trainable = trainable;
        g.slots = slots;
        params.insert(g).map_err(|e| bad(e.to_string()))?;
    }
    if r.pos != body.len() {
        return Err(bad("trailing bytes after the parameter table"));
    }
    let lora = match (meta.lora_rank, meta.lora_scale) {
        (Some(rank), Some(scale)) => Some(LoraSettings { rank, scale }),
        (None, None) => None,
        _ => return Err(bad("inconsistent LoRA metadata")),
    };
    let model = CodecLm::from_parts(meta.model.clone(), params, lora).map_err(|e| bad(format!("size mismatch: {e}")))?;
    Ok((model, meta, hash))
}
