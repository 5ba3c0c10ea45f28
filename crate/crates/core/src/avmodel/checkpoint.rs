//! Checkpoint container.
//!
//! Layout: `AVCK`, u32 LE format version, u32 LE header length, JSON header,
//! the binary32 LE payload of every tensor in header order, then a u32 LE
//! CRC32 over all preceding bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{Architecture, ModelConfig, ModelParams, ParamEntry};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    offset: usize,
    trainable: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    arch: Architecture,
    with_uncertainty: bool,
    config: ModelConfig,
    params: Vec<TensorRecord>,
}

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let mut records = Vec::new();
    let mut payload = Vec::new();
    for (name, e) in params.entries() {
        records.push(TensorRecord {
            name: name.clone(),
            shape: e.value.shape().to_vec(),
            offset: payload.len(),
            trainable: e.trainable,
        });
        for &x in e.value.data() {
            payload.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let header = Header {
        version: CHECKPOINT_VERSION,
        arch: params.arch,
        with_uncertainty: params.with_uncertainty,
        config: params.config.clone(),
        params: records,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + header.len() + payload.len() + 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<ModelParams> {
    let shown = path.display();
    let truncated = |detail: String| Error::Truncated {
        path: path.into(),
        detail,
    };
    if bytes.len() < 16 {
        return Err(truncated(format!("{} bytes is shorter than the fixed header", bytes.len())));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: *CHECKPOINT_MAGIC,
            found: bytes[..4].try_into().expect("4 bytes"),
        });
    }
    let version = u32_at(bytes, 4);
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.into(),
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let header_len = u32_at(bytes, 8) as usize;
    let payload_start = 12 + header_len;
    if bytes.len() < payload_start + 4 {
        return Err(truncated("header runs past end of file".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[12..payload_start])
        .map_err(|e| Error::Data(format!("{shown}: checkpoint header: {e}")))?;
    let expected_payload: usize = header
        .params
        .iter()
        .map(|r| 4 * r.shape.iter().product::<usize>())
        .sum();
    let body_end = payload_start + expected_payload;
    if bytes.len() < body_end + 4 {
        return Err(truncated(format!(
            "payload needs {expected_payload} bytes, file has {}",
            bytes.len().saturating_sub(payload_start + 4)
        )));
    }
    if bytes.len() > body_end + 4 {
        return Err(Error::Data(format!(
            "{shown}: {} trailing bytes after checkpoint",
            bytes.len() - body_end - 4
        )));
    }
    let stored = u32_at(bytes, body_end);
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::Checksum {
            path: path.into(),
            stored,
            computed,
        });
    }
    let payload = &bytes[payload_start..body_end];
    let mut entries = BTreeMap::new();
    for r in header.params {
        let n: usize = r.shape.iter().product();
        let end = r.offset + 4 * n;
        if end > payload.len() {
            return Err(Error::Data(format!("{shown}: tensor {} lies outside the payload", r.name)));
        }
        let data = payload[r.offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        let value = Tensor::new(r.shape, data)
            .map_err(|e| Error::Data(format!("{shown}: tensor {}: {e}", r.name)))?;
        if !value.is_finite() {
            return Err(Error::Data(format!("{shown}: tensor {} has non-finite values", r.name)));
        }
        entries.insert(
            r.name,
            ParamEntry {
                value,
                trainable: r.trainable,
            },
        );
    }
    ModelParams::from_entries(header.config, header.arch, header.with_uncertainty, entries)
        .map_err(|e| Error::Data(format!("{shown}: {e}")))
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
