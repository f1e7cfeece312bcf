//! Checkpoint container.
//!
//! Layout: the 8-byte magic `TKTOCKPT`, a little-endian `u64` header length,
//! a JSON header `{format_version, model_config, manifest: [{name, shape}]}`,
//! then every parameter as raw little-endian `f64` in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TKTOCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    model_config: ModelConfig,
    manifest: Vec<ManifestEntry>,
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let header = Header {
        format_version: FORMAT_VERSION,
        model_config: model.config().clone(),
        manifest: model
            .named_params()
            .map(|(name, t)| ManifestEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + model.num_params() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.params() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a checkpoint; the model comes back frozen.
pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing TKTOCKPT magic"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body_start = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..body_start])
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    let template = Model::new(header.model_config.clone())?;
    let expected: Vec<_> = template.named_params().map(|(n, _)| n).collect();
    let found: Vec<_> = header.manifest.iter().map(|e| e.name.as_str()).collect();
    if expected != found {
        return Err(Error::Checkpoint(format!(
            "manifest names {found:?} do not match {expected:?}"
        )));
    }
    let mut offset = body_start;
    let mut params = Vec::with_capacity(header.manifest.len());
    for entry in &header.manifest {
        let n: usize = entry.shape.iter().product();
        let end = offset + n * 8;
        if end > bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated data for {}",
                entry.name
            )));
        }
        let data = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.push(Tensor::new(entry.shape.clone(), data)?);
        offset = end;
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after parameter data"));
    }
    Model::from_parts(header.model_config, params, true)
}

/// Hex SHA-256 of the serialized checkpoint.
pub fn digest(model: &Model) -> Result<String> {
    Ok(digest_bytes(&to_bytes(model)?))
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `model` to `path` and returns the file digest.
pub fn save(model: &Model, path: &Path) -> Result<String> {
    let bytes = to_bytes(model)?;
    fs::write(path, &bytes).map_err(|e| Error::file(path, e))?;
    Ok(digest_bytes(&bytes))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    from_bytes(&bytes)
}

/// Digest of a file on disk.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    Ok(digest_bytes(&bytes))
}
