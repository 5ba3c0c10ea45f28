//! Binary containers for feature sequences and frame masks.
//!
//! AVFE layout (all integers little-endian):
//!
//! | bytes     | field                                   |
//! |-----------|-----------------------------------------|
//! | 4         | magic `AVFE`                            |
//! | 4         | format version (`u32`)                  |
//! | 4         | rows `N` (`u32`)                        |
//! | 4         | columns `d` (`u32`)                     |
//! | 1         | modality tag (`u8`)                     |
//! | 4·N·d     | binary32 values, row-major              |
//! | 4         | CRC-32 of the value bytes               |
//!
//! AVGT layout: magic `AVGT`, frame count (`u32`), one `u8` class index per frame.

use std::fs;
use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const AVFE_MAGIC: [u8; 4] = *b"AVFE";
pub const AVGT_MAGIC: [u8; 4] = *b"AVGT";
pub const AVFE_VERSION: u32 = 1;
pub const AVFE_HEADER_LEN: usize = 17;

/// Modality tag stored in byte 16 of an AVFE file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Visual,
    Audio,
    /// Score dump: column 0 is the anomaly confidence, then one column per class.
    Scores,
    /// Class-label text embeddings, one row per class.
    ClassText,
}

impl Modality {
    pub fn tag(self) -> u8 {
        match self {
            Modality::Visual => 0,
            Modality::Audio => 1,
            Modality::Scores => 2,
            Modality::ClassText => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Modality::Visual),
            1 => Some(Modality::Audio),
            2 => Some(Modality::Scores),
            3 => Some(Modality::ClassText),
            _ => None,
        }
    }
}

/// An `N x d` sequence of per-frame embeddings for one modality of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub video_id: String,
    pub modality: Modality,
    pub n_frames: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureSequence {
    pub fn new(
        video_id: impl Into<String>,
        modality: Modality,
        n_frames: usize,
        dim: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        let video_id = video_id.into();
        if n_frames == 0 || dim == 0 {
            return Err(Error::Contract(format!(
                "{video_id}: feature sequence must be non-empty, got {n_frames}x{dim}"
            )));
        }
        if data.len() != n_frames * dim {
            return Err(Error::Dimension {
                op: "feature_sequence",
                lhs: vec![n_frames, dim],
                rhs: vec![data.len()],
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "{video_id}: non-finite value at frame {} column {}",
                i / dim,
                i % dim
            )));
        }
        Ok(Self {
            video_id,
            modality,
            n_frames,
            dim,
            data,
        })
    }

    pub fn from_tensor(video_id: impl Into<String>, modality: Modality, t: &Tensor) -> Result<Self> {
        let (n, d) = t.dims2();
        Self::new(
            video_id,
            modality,
            n,
            d,
            t.data().iter().map(|&v| v as f32).collect(),
        )
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(
            self.n_frames,
            self.dim,
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("validated shape")
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn encode_features(seq: &FeatureSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(AVFE_HEADER_LEN + 4 * seq.data.len() + 4);
    out.extend_from_slice(&AVFE_MAGIC);
    out.extend_from_slice(&AVFE_VERSION.to_le_bytes());
    out.extend_from_slice(&(seq.n_frames as u32).to_le_bytes());
    out.extend_from_slice(&(seq.dim as u32).to_le_bytes());
    out.push(seq.modality.tag());
    for v in &seq.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[AVFE_HEADER_LEN..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Decode an AVFE buffer. `path` is only used to label errors.
pub fn decode_features(bytes: &[u8], video_id: &str, path: &Path) -> Result<FeatureSequence> {
    let truncated = |detail: String| Error::Truncated {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 4 {
        return Err(truncated(format!("{} bytes, no magic", bytes.len())));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != AVFE_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: AVFE_MAGIC,
            found: magic,
        });
    }
    if bytes.len() < AVFE_HEADER_LEN {
        return Err(truncated(format!("{} byte header", bytes.len())));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != AVFE_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            expected: AVFE_VERSION,
            found: version,
        });
    }
    let (n, d) = (u32_at(8) as usize, u32_at(12) as usize);
    let tag = bytes[16];
    let modality = Modality::from_tag(tag)
        .ok_or_else(|| Error::Data(format!("{}: unknown modality tag {tag}", path.display())))?;
    let payload_len = n
        .checked_mul(d)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::Data(format!("{}: header size overflow", path.display())))?;
    let expected = AVFE_HEADER_LEN + payload_len + 4;
    if bytes.len() < expected {
        return Err(truncated(format!(
            "{} bytes, header declares {n}x{d} needing {expected}",
            bytes.len()
        )));
    }
    if bytes.len() > expected {
        return Err(Error::Data(format!(
            "{}: {} trailing bytes after checksum",
            path.display(),
            bytes.len() - expected
        )));
    }
    let payload = &bytes[AVFE_HEADER_LEN..AVFE_HEADER_LEN + payload_len];
    let stored = u32_at(AVFE_HEADER_LEN + payload_len);
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    FeatureSequence::new(video_id, modality, n, d, data)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn write_features(seq: &FeatureSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_features(seq)).map_err(|e| Error::io(path, e))
}

/// Read an AVFE file; the video id is taken from the file stem up to the first dot.
pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_name()
        .and_then(|s| s.to_str())
        .map(|s| s.split('.').next().unwrap_or(s).to_string())
        .unwrap_or_default();
    decode_features(&bytes, &id, path)
}

pub fn encode_mask(mask: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + mask.len());
    out.extend_from_slice(&AVGT_MAGIC);
    out.extend_from_slice(&(mask.len() as u32).to_le_bytes());
    out.extend_from_slice(mask);
    out
}

pub fn decode_mask(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    if bytes.len() < 8 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("{} byte mask header", bytes.len()),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != AVGT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: AVGT_MAGIC,
            found: magic,
        });
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("mask declares {n} frames, found {}", body.len()),
        });
    }
    if body.len() > n {
        return Err(Error::Data(format!(
            "{}: {} trailing bytes after mask",
            path.display(),
            body.len() - n
        )));
    }
    Ok(body.to_vec())
}

pub fn write_mask(mask: &[u8], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_mask(mask)).map_err(|e| Error::io(path, e))
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mask(&bytes, path)
}
