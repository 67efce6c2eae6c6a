//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! magic    b"BIGFAIR\0"
//! version  u32 (1)
//! config   u32 byte length, then UTF-8 "key=value\n" lines
//! count    u32 number of parameters
//! per parameter:
//!   u32 name length, name bytes
//!   u32 rank, rank x u64 dims
//!   f64 values in row-major order
//! ```
//!
//! The config block holds the model config followed by any caller metadata
//! (training step, seed). Values round-trip bit-exactly.

use std::fs;
use std::path::Path;

use bigfair_tensor::{ParamStore, Tensor};

use super::{ModelConfig, NewsRecommender};
use crate::error::{io_err, Error, Result};

const MAGIC: &[u8; 8] = b"BIGFAIR\0";
const VERSION: u32 = 1;

pub fn encode(model: &NewsRecommender, meta: &[(String, String)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let mut block = String::new();
    for (k, v) in model.config().to_kv().iter().chain(meta) {
        block.push_str(&format!("{k}={v}\n"));
    }
    out.extend_from_slice(&(block.len() as u32).to_le_bytes());
    out.extend_from_slice(block.as_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for p in model.params().iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in p.value.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Returns the model and the metadata pairs that are not model config keys.
pub fn decode(bytes: &[u8]) -> std::result::Result<(NewsRecommender, Vec<(String, String)>), String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let len = r.u32()? as usize;
    let block = std::str::from_utf8(r.take(len)?).map_err(|_| "config block is not UTF-8".to_string())?;
    let mut pairs = Vec::new();
    for line in block.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("malformed config line `{line}`"))?;
        pairs.push((k.to_string(), v.to_string()));
    }
    let config = ModelConfig::from_kv(&pairs).map_err(|e| e.to_string())?;
    let model_keys: Vec<String> = config.to_kv().into_iter().map(|(k, _)| k).collect();
    let meta = pairs.into_iter().filter(|(k, _)| !model_keys.contains(k)).collect();

    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| "parameter name is not UTF-8".to_string())?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, d| acc.checked_mul(*d))
            .ok_or("parameter shape overflows")?;
        let raw = r.take(n.checked_mul(8).ok_or("parameter shape overflows")?)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, values).map_err(|e| format!("parameter `{name}`: {e}"))?;
        params.push(name, tensor);
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    let model = NewsRecommender::from_params(config, params).map_err(|e| e.to_string())?;
    Ok((model, meta))
}

pub fn save(path: &Path, model: &NewsRecommender, meta: &[(String, String)]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, encode(model, meta)).map_err(io_err(path))
}

pub fn load(path: &Path) -> Result<(NewsRecommender, Vec<(String, String)>)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode(&bytes).map_err(|msg| Error::Checkpoint {
        path: path.display().to_string(),
        msg,
    })
}
