//! Encoder checkpoint files: an 8-byte magic, a little-endian `u64` header
//! length, a JSON header, then every parameter as little-endian `f64` in
//! header order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ParamStore, Tensor};
use super::registry::sha256_hex;
use super::{EncoderMeta, VisionEncoder};
use crate::error::{ReidError, Result};

const MAGIC: &[u8; 8] = b"RIDCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    #[serde(flatten)]
    pub meta: EncoderMeta,
    pub tensors: Vec<TensorEntry>,
    pub payload_sha256: String,
    #[serde(default)]
    pub config_hash: Option<String>,
}

pub fn save_checkpoint(path: &Path, enc: &VisionEncoder, config_hash: Option<&str>) -> Result<()> {
    let mut payload = Vec::with_capacity(enc.params().num_scalars() * 8);
    let mut tensors = Vec::with_capacity(enc.params().len());
    for (name, t) in enc.params().iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape.clone(),
        });
        for v in &t.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        meta: enc.meta().clone(),
        tensors,
        payload_sha256: sha256_hex(&payload),
        config_hash: config_hash.map(str::to_string),
    };
    let json = serde_json::to_vec(&header)?;
    let tmp = path.with_extension("partial");
    let write = || -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        f.write_all(MAGIC)?;
        f.write_all(&(json.len() as u64).to_le_bytes())?;
        f.write_all(&json)?;
        f.write_all(&payload)?;
        f.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| ReidError::io(path, e))
}

pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = std::fs::read(path).map_err(|e| ReidError::io(path, e))?;
    Ok(split(path, &bytes)?.0)
}

fn split<'a>(path: &Path, bytes: &'a [u8]) -> Result<(CheckpointHeader, &'a [u8])> {
    let bad = |m: &str| ReidError::Weights(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not an encoder checkpoint"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    Ok((header, &bytes[16 + len..]))
}

pub fn load_checkpoint(path: &Path) -> Result<(VisionEncoder, CheckpointHeader)> {
    let bytes = std::fs::read(path).map_err(|e| ReidError::io(path, e))?;
    let (header, payload) = split(path, &bytes)?;
    let actual = sha256_hex(payload);
    if actual != header.payload_sha256 {
        return Err(ReidError::Checksum {
            what: path.display().to_string(),
            expected: header.payload_sha256.clone(),
            actual,
        });
    }
    let mut store = ParamStore::new();
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(n).collect();
        if data.len() != n {
            return Err(ReidError::Weights(format!("{}: payload too short", path.display())));
        }
        store.add(t.name.clone(), Tensor::new(t.shape.clone(), data));
    }
    let enc = VisionEncoder::from_parts(header.meta.clone(), store)?;
    Ok((enc, header))
}
