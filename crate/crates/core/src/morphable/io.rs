//! `DAMD3DMM` model files: magic, little-endian `u64` header length, UTF-8
//! JSON header, then little-endian `f32` blocks (mean shape, identity basis,
//! expression basis, parameter std, mean texture; bases column-major)
//! followed by `u32` triangle indices.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MorphableModel, NUM_EXP, NUM_ID, NUM_PARAMS};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 8] = b"DAMD3DMM";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    #[serde(rename = "N")]
    n: usize,
    landmark_indices: Vec<u32>,
    triangle_count: usize,
    offsets: Offsets,
}

/// Byte offsets of each block from the start of the payload.
#[derive(Debug, PartialEq, Eq, Serialize, Deserialize)]
struct Offsets {
    mean_shape: usize,
    id_basis: usize,
    exp_basis: usize,
    param_std: usize,
    mean_texture: usize,
    triangles: usize,
}

impl Offsets {
    fn for_size(n: usize) -> Self {
        let mean_shape = 0;
        let id_basis = mean_shape + 4 * 3 * n;
        let exp_basis = id_basis + 4 * 3 * n * NUM_ID;
        let param_std = exp_basis + 4 * 3 * n * NUM_EXP;
        let mean_texture = param_std + 4 * NUM_PARAMS;
        let triangles = mean_texture + 4 * 3 * n;
        Self { mean_shape, id_basis, exp_basis, param_std, mean_texture, triangles }
    }
}

pub fn write_model(path: &Path, model: &MorphableModel) -> Result<()> {
    model.validate()?;
    let n = model.num_vertices();
    let header = Header {
        n,
        landmark_indices: model.landmark_indices.clone(),
        triangle_count: model.triangles.len(),
        offsets: Offsets::for_size(n),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for block in [&model.mean_shape, &model.id_basis, &model.exp_basis, &model.param_std, &model.mean_texture] {
        for &v in block.iter() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    for &i in model.triangles.iter().flatten() {
        buf.extend_from_slice(&i.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_model(path: &Path) -> Result<MorphableModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MODEL_MAGIC {
        return Err(Error::format(path, "missing DAMD3DMM magic"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes.get(16..16 + header_len).ok_or_else(|| Error::format(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    let expected = Offsets::for_size(header.n);
    if header.offsets != expected {
        return Err(Error::format(path, "block offsets do not match the declared vertex count"));
    }
    let payload = &bytes[16 + header_len..];
    let total = expected.triangles + 12 * header.triangle_count;
    if payload.len() != total {
        return Err(Error::format(path, format!("payload is {} bytes, expected {total}", payload.len())));
    }
    let floats = |start: usize, end: usize| -> Vec<f64> {
        payload[start..end]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect()
    };
    let o = &expected;
    let triangles = payload[o.triangles..]
        .chunks_exact(12)
        .map(|c| {
            let idx = |k: usize| u32::from_le_bytes(c[4 * k..4 * k + 4].try_into().expect("4 bytes"));
            [idx(0), idx(1), idx(2)]
        })
        .collect();
    let model = MorphableModel {
        mean_shape: floats(o.mean_shape, o.id_basis),
        id_basis: floats(o.id_basis, o.exp_basis),
        exp_basis: floats(o.exp_basis, o.param_std),
        param_std: floats(o.param_std, o.mean_texture),
        mean_texture: floats(o.mean_texture, o.triangles),
        triangles,
        landmark_indices: header.landmark_indices,
    };
    model.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphable::generate_synthetic_model;

    #[test]
    fn model_file_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.3dmm");
        let model = generate_synthetic_model(9, 120).unwrap();
        write_model(&path, &model).unwrap();
        assert_eq!(read_model(&path).unwrap(), model);
        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_model(&path), Err(Error::Format { .. })));
    }
}
