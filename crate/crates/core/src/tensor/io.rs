//! `DAMDWTS1` weights files: magic, little-endian `u64` manifest length,
//! UTF-8 JSON manifest (ordered `{name, shape, dtype}` list), then the raw
//! little-endian payload of every tensor in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{Float, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 8] = b"DAMDWTS1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
}

pub fn write_weights<T: Float>(path: &Path, params: &ParamStore<T>) -> Result<()> {
    let manifest: Vec<ManifestEntry> = params
        .iter()
        .map(|(name, t, _)| ManifestEntry { name: name.to_string(), shape: t.shape().to_vec(), dtype: T::DTYPE })
        .collect();
    let header = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut buf = Vec::with_capacity(16 + header.len());
    buf.extend_from_slice(WEIGHTS_MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, t, _) in params.iter() {
        for &v in t.data() {
            match T::DTYPE {
                DType::F32 => buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                DType::F64 => buf.extend_from_slice(&v.as_f64().to_le_bytes()),
            }
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Reads every tensor, converting to `T` when the stored dtype differs.
pub fn read_weights<T: Float>(path: &Path) -> Result<IndexMap<String, Tensor<T>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != WEIGHTS_MAGIC {
        return Err(Error::format(path, "missing DAMDWTS1 magic"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header = bytes.get(16..16 + header_len).ok_or_else(|| Error::format(path, "truncated manifest"))?;
    let manifest: Vec<ManifestEntry> =
        serde_json::from_slice(header).map_err(|e| Error::format(path, format!("bad manifest: {e}")))?;
    let mut offset = 16 + header_len;
    let mut out = IndexMap::new();
    for entry in manifest {
        let numel: usize = entry.shape.iter().product();
        let width = entry.dtype.width();
        let raw = bytes
            .get(offset..offset + numel * width)
            .ok_or_else(|| Error::format(path, format!("payload of `{}` truncated", entry.name)))?;
        offset += numel * width;
        let data: Vec<T> = match entry.dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| T::from_f64(f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))))
                .collect(),
            DType::F64 => {
                raw.chunks_exact(8).map(|c| T::from_f64(f64::from_le_bytes(c.try_into().expect("8 bytes")))).collect()
            }
        };
        if out.insert(entry.name.clone(), Tensor::new(entry.shape, data)?).is_some() {
            return Err(Error::format(path, format!("duplicate tensor `{}`", entry.name)));
        }
    }
    if offset != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - offset)));
    }
    Ok(out)
}
