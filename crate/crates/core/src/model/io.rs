//! `.snpm` model files and `.snpc` calibration sets.
//!
//! Model layout: `b"SNPM"`, `u32` version, `u64` header length, a JSON header
//! `{config, tensor_count, tensors: [{name, shape, offset, length, sha256}]}`, zero
//! padding to a 64-byte boundary, then little-endian `f32` payloads. Offsets
//! are relative to the start of the payload section and 64-byte aligned.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{ModelBundle, ModelConfig};

const MODEL_MAGIC: &[u8; 4] = b"SNPM";
const CALIB_MAGIC: &[u8; 4] = b"SNPC";
const VERSION: u32 = 1;
const ALIGN: usize = 64;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
    /// Hex SHA-256 of the payload bytes.
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensor_count: u64,
    tensors: Vec<TensorEntry>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn payload(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub(super) fn header_bytes(model: &ModelBundle) -> Vec<u8> {
    let mut offset = 0usize;
    let tensors = model
        .tensors()
        .iter()
        .map(|(name, t)| {
            let length = t.numel() * 4;
            let entry = TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: offset as u64,
                length: length as u64,
                sha256: hex_digest(&payload(t)),
            };
            offset = align_up(offset + length);
            entry
        })
        .collect::<Vec<_>>();
    let header = Header {
        config: model.config().clone(),
        tensor_count: tensors.len() as u64,
        tensors,
    };
    // Round-tripping through `Value` sorts object keys.
    let value = serde_json::to_value(&header).expect("header serializes");
    serde_json::to_vec(&value).expect("header serializes")
}

pub(super) fn fingerprint(header: &[u8]) -> String {
    hex_digest(header)
}

pub fn model_to_bytes(model: &ModelBundle) -> Vec<u8> {
    let header = model.header();
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header);
    out.resize(align_up(out.len()), 0);
    let data_start = out.len();
    for t in model.tensors().values() {
        out.resize(data_start + align_up(out.len() - data_start), 0);
        out.extend(payload(t));
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|s| u32::from_le_bytes(s.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Truncated(format!("need 4 bytes at offset {at}")))
}

fn read_u64(bytes: &[u8], at: usize) -> Result<u64> {
    bytes
        .get(at..at + 8)
        .map(|s| u64::from_le_bytes(s.try_into().expect("8 bytes")))
        .ok_or_else(|| Error::Truncated(format!("need 8 bytes at offset {at}")))
}

fn f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect()
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<ModelBundle> {
    if bytes.len() < 4 {
        return Err(Error::Truncated("missing magic".into()));
    }
    if &bytes[..4] != MODEL_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}, expected SNPM", &bytes[..4])));
    }
    let version = read_u32(bytes, 4)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported model version {version}")));
    }
    let header_len = usize::try_from(read_u64(bytes, 8)?)
        .map_err(|_| Error::Integrity("header length overflows".into()))?;
    let header_end = 16usize
        .checked_add(header_len)
        .ok_or_else(|| Error::Integrity("header length overflows".into()))?;
    let raw = bytes
        .get(16..header_end)
        .ok_or_else(|| Error::Truncated(format!("header needs {header_len} bytes")))?;
    let header: Header = serde_json::from_slice(raw)
        .map_err(|e| Error::Format(format!("malformed header: {e}")))?;
    if header.tensor_count as usize != header.tensors.len() {
        return Err(Error::Integrity(format!(
            "header declares {} tensors but indexes {}",
            header.tensor_count,
            header.tensors.len()
        )));
    }

    let data_start = align_up(header_end);
    let mut expected_offset = 0usize;
    let mut tensors = BTreeMap::new();
    for entry in &header.tensors {
        let numel: usize = entry.shape.iter().product();
        let (offset, length) = (entry.offset as usize, entry.length as usize);
        if length != numel * 4 {
            return Err(Error::Integrity(format!(
                "tensor {} has {length} payload bytes for shape {:?}",
                entry.name, entry.shape
            )));
        }
        if offset != expected_offset {
            return Err(Error::Integrity(format!(
                "tensor {} at offset {offset}, expected {expected_offset}",
                entry.name
            )));
        }
        let start = data_start + offset;
        let payload = bytes.get(start..start + length).ok_or_else(|| {
            Error::Truncated(format!("payload of {} ends past end of file", entry.name))
        })?;
        if hex_digest(payload) != entry.sha256 {
            return Err(Error::Integrity(format!("checksum mismatch in tensor {}", entry.name)));
        }
        let tensor = Tensor::new(entry.shape.clone(), f32s(payload))
            .map_err(|e| Error::Shape(format!("tensor {}: {e}", entry.name)))?;
        if tensors.insert(entry.name.clone(), tensor).is_some() {
            return Err(Error::Integrity(format!("duplicate tensor {}", entry.name)));
        }
        expected_offset = align_up(offset + length);
    }
    let end = header
        .tensors
        .last()
        .map_or(data_start, |e| data_start + (e.offset + e.length) as usize);
    if bytes.len() > end {
        return Err(Error::Integrity(format!(
            "{} trailing bytes after payload",
            bytes.len() - end
        )));
    }
    ModelBundle::new(header.config, tensors)
}

pub fn save_model(model: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, model_to_bytes(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelBundle> {
    model_from_bytes(&fs::read(path)?)
}

/// Calibration images, each `channels × height × width`.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub images: Vec<Tensor>,
}

impl CalibrationSet {
    pub fn new(channels: usize, height: usize, width: usize, images: Vec<Tensor>) -> Result<Self> {
        if let Some(bad) = images.iter().find(|t| t.shape() != [channels, height, width]) {
            return Err(Error::Dimension(format!(
                "calibration image shape {:?}, expected [{channels}, {height}, {width}]",
                bad.shape()
            )));
        }
        Ok(Self { channels, height, width, images })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CALIB_MAGIC);
        for v in [
            VERSION,
            self.images.len() as u32,
            self.channels as u32,
            self.height as u32,
            self.width as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for img in &self.images {
            for v in img.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated("missing magic".into()));
        }
        if &bytes[..4] != CALIB_MAGIC {
            return Err(Error::Format(format!("bad magic {:?}, expected SNPC", &bytes[..4])));
        }
        let version = read_u32(bytes, 4)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported calibration version {version}")));
        }
        let count = read_u32(bytes, 8)? as usize;
        let (c, h, w) = (
            read_u32(bytes, 12)? as usize,
            read_u32(bytes, 16)? as usize,
            read_u32(bytes, 20)? as usize,
        );
        let per_image = c * h * w * 4;
        let needed = 24 + count * per_image;
        if bytes.len() < needed {
            return Err(Error::Truncated(format!(
                "{count} images need {needed} bytes, file has {}",
                bytes.len()
            )));
        }
        if bytes.len() > needed {
            return Err(Error::Integrity(format!("{} trailing bytes", bytes.len() - needed)));
        }
        let images = bytes[24..]
            .chunks_exact(per_image.max(1))
            .take(count)
            .map(|chunk| Tensor::new(vec![c, h, w], f32s(chunk)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(c, h, w, images)
    }
}

pub fn save_calibration(set: &CalibrationSet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, set.to_bytes())?;
    Ok(())
}

pub fn load_calibration(path: impl AsRef<Path>) -> Result<CalibrationSet> {
    CalibrationSet::from_bytes(&fs::read(path)?)
}
