//! Checkpoint files: a JSON header followed by raw little-endian `f32`
//! payloads, one per parameter, in header order.
//!
//! Layout: one JSON object, a single `\n`, then the concatenated payloads.
//! `offset`/`len` in each record are byte ranges relative to the start of the
//! payload region.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::tensor::{Element, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub len: u64,
}

#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct Header {
    pub version: u32,
    /// Free-form model metadata (kind, architecture config, seed).
    pub meta: serde_json::Value,
    pub params: Vec<ParamRecord>,
}

/// Writes `store` to `path`. Values are converted to `f32` on disk.
pub fn save<T: Element>(path: &Path, store: &ParamStore<T>, meta: serde_json::Value) -> Result<()> {
    let mut records = Vec::new();
    let mut payload = Vec::new();
    for (name, tensor) in store.iter() {
        let offset = payload.len() as u64;
        for &v in tensor.data() {
            payload.extend_from_slice(&v.as_f32().to_le_bytes());
        }
        records.push(ParamRecord {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            dtype: "f32".to_string(),
            offset,
            len: (payload.len() as u64) - offset,
        });
    }
    let header = Header { version: FORMAT_VERSION, meta, params: records };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut file = fs::File::create(path)?;
    serde_json::to_writer(&mut file, &header)?;
    file.write_all(b"\n")?;
    file.write_all(&payload)?;
    Ok(())
}

/// Loads a checkpoint into an `f32` store plus its metadata.
pub fn load(path: &Path) -> Result<(ParamStore<f32>, Header)> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut stream = serde_json::Deserializer::from_slice(&bytes).into_iter::<Header>();
    let header = stream
        .next()
        .ok_or_else(|| Error::format(format!("{}: empty checkpoint", path.display())))?
        .map_err(|e| Error::format(format!("{}: bad header: {e}", path.display())))?;
    let mut pos = stream.byte_offset();
    if bytes.get(pos) != Some(&b'\n') {
        return Err(Error::format(format!(
            "{}: missing newline after header",
            path.display()
        )));
    }
    pos += 1;
    if header.version != FORMAT_VERSION {
        return Err(Error::format(format!(
            "{}: unsupported checkpoint version {}",
            path.display(),
            header.version
        )));
    }
    let payload = &bytes[pos..];
    let mut store = ParamStore::new();
    for rec in &header.params {
        if rec.dtype != "f32" {
            return Err(Error::format(format!(
                "{}: unsupported dtype {:?} for {:?}",
                path.display(),
                rec.dtype,
                rec.name
            )));
        }
        let numel: usize = rec.shape.iter().product();
        if rec.len as usize != numel * 4 {
            return Err(Error::format(format!(
                "{}: payload length mismatch for {:?}",
                path.display(),
                rec.name
            )));
        }
        let start = rec.offset as usize;
        let end = start + rec.len as usize;
        if end > payload.len() {
            return Err(Error::format(format!(
                "{}: payload truncated at {:?}",
                path.display(),
                rec.name
            )));
        }
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        store.insert(&rec.name, Tensor::new(rec.shape.clone(), data)?)?;
    }
    Ok((store, header))
}
