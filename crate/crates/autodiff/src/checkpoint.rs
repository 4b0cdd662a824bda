//! Single-file parameter checkpoints.
//!
//! Layout: one line of compact JSON (the header), a `\n`, then every tensor's
//! values as little-endian `f64` in header order. Nothing follows the last
//! buffer.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const FORMAT: &str = "gwsel-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub seed: u64,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes(params: &ParamSet, seed: u64, step: u64) -> Result<Vec<u8>> {
    let header = Header {
        format: FORMAT.to_string(),
        version: VERSION,
        dtype: "f64".to_string(),
        seed,
        step,
        tensors: params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for (_, t) in params.iter() {
        out.extend_from_slice(&t.to_le_bytes());
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Header, ParamSet)> {
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing header terminator".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..split])?;
    if header.format != FORMAT || header.version != VERSION || header.dtype != "f64" {
        return Err(Error::Checkpoint(format!(
            "unsupported {} v{} ({})",
            header.format, header.version, header.dtype
        )));
    }
    let mut body = &bytes[split + 1..];
    let mut params = ParamSet::new();
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        if body.len() < n * 8 {
            return Err(Error::Checkpoint(format!("truncated buffer for `{}`", entry.name)));
        }
        let (chunk, rest) = body.split_at(n * 8);
        let data = chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        params.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?)?;
        body = rest;
    }
    if !body.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len())));
    }
    Ok((header, params))
}

pub fn save(path: &Path, params: &ParamSet, seed: u64, step: u64) -> Result<()> {
    atomic_write(path, &to_bytes(params, seed, step)?)
}

pub fn load(path: &Path) -> Result<(Header, ParamSet)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Writes `bytes` to a sibling temp file, syncs it and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()
    };
    if let Err(e) = write() {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(&tmp, e));
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
