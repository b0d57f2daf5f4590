//! Binary checkpoint format:
//!
//! ```text
//! "ERGCKPT1"                      8 bytes
//! manifest length                 u32, little endian
//! manifest                        UTF-8 JSON, [{name, shape, dtype: "f32", offset, nbytes}, ...]
//! payload                         little-endian f32 data
//! ```
//!
//! Offsets count from the first payload byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Result};
use crate::model::ModelParams;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ERGCKPT1";
const MAGIC_STEM: &[u8; 7] = b"ERGCKPT";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub nbytes: usize,
}

/// Serializes parameters (stored as f32) to bytes.
pub fn encode<T: Scalar>(params: &ModelParams<T>) -> Result<Vec<u8>> {
    let mut manifest = Vec::with_capacity(params.len());
    let mut payload = Vec::with_capacity(params.num_scalars() * 4);
    for (name, t) in params.iter() {
        let offset = payload.len();
        for v in t.data() {
            payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        manifest.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset,
            nbytes: payload.len() - offset,
        });
    }
    let json = serde_json::to_vec(&manifest)?;
    let len = u32::try_from(json.len()).map_err(|_| CheckpointError::Manifest("manifest too large".into()))?;
    let mut out = Vec::with_capacity(12 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses bytes produced by [`encode`].
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<ModelParams<T>> {
    if bytes.len() < 8 || &bytes[..7] != MAGIC_STEM {
        return Err(CheckpointError::BadMagic.into());
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::VersionMismatch {
            found: String::from_utf8_lossy(&bytes[..8]).into_owned(),
        }
        .into());
    }
    let len_bytes: [u8; 4] = bytes
        .get(8..12)
        .ok_or_else(|| CheckpointError::Truncated("missing manifest length".into()))?
        .try_into()
        .expect("slice of four bytes");
    let len = u32::from_le_bytes(len_bytes) as usize;
    let json = bytes
        .get(12..12 + len)
        .ok_or_else(|| CheckpointError::Truncated("manifest extends past end of file".into()))?;
    let manifest: Vec<ManifestEntry> =
        serde_json::from_slice(json).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let payload = &bytes[12 + len..];

    let mut params = ModelParams::new();
    for e in manifest {
        if e.dtype != "f32" {
            return Err(CheckpointError::Manifest(format!("`{}`: unsupported dtype {}", e.name, e.dtype)).into());
        }
        let count: usize = e.shape.iter().product();
        if e.nbytes != 4 * count {
            return Err(CheckpointError::Manifest(format!(
                "`{}`: nbytes {} does not match shape {:?}",
                e.name, e.nbytes, e.shape
            ))
            .into());
        }
        let raw = payload
            .get(e.offset..e.offset + e.nbytes)
            .ok_or_else(|| CheckpointError::Truncated(format!("payload of `{}`", e.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("four bytes")) as f64))
            .collect();
        let t = Tensor::new(e.shape.clone(), data)?;
        params
            .insert(e.name.clone(), t)
            .map_err(|_| CheckpointError::Manifest(format!("duplicate name `{}`", e.name)))?;
    }
    Ok(params)
}

pub fn save_checkpoint<T: Scalar>(params: &ModelParams<T>, path: &Path) -> Result<()> {
    fs::write(path, encode(params)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ModelParams<T>> {
    decode(&fs::read(path)?)
}
