//! Binary checkpoint: `"PSVT"`, `u32` LE version, `u32` LE header length,
//! UTF-8 JSON header, then little-endian `f32` blobs in header order.
//!
//! The header maps each tensor path to `{dtype, shape, offset, byte_length}`
//! (offsets relative to the first blob byte). The model configuration lives
//! under `"__config__"`; `"__buffers__"` lists the paths that are
//! non-trainable statistics rather than parameters.

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::model::{ParamStore, PsVitConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PSVT";
pub const VERSION: u32 = 1;
const CONFIG_KEY: &str = "__config__";
const BUFFERS_KEY: &str = "__buffers__";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub byte_length: u64,
}

/// Serializes `store` to bytes.
pub fn encode(store: &ParamStore) -> Result<Vec<u8>> {
    let mut header = Map::new();
    header.insert(CONFIG_KEY.into(), serde_json::to_value(&store.config)?);
    header.insert(
        BUFFERS_KEY.into(),
        Value::Array(store.buffers.keys().map(|k| Value::String(k.clone())).collect()),
    );
    let mut offset = 0u64;
    let tensors: Vec<(&String, &Tensor<f32>)> = store.params.iter().chain(&store.buffers).collect();
    for (path, t) in &tensors {
        if path.starts_with("__") {
            return Err(Error::Checkpoint(format!("reserved tensor path {path:?}")));
        }
        let byte_length = 4 * t.len() as u64;
        let entry = TensorEntry {
            dtype: "f32".into(),
            shape: t.shape().to_vec(),
            offset,
            byte_length,
        };
        if header.insert((*path).clone(), serde_json::to_value(entry)?).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor path {path:?}")));
        }
        offset += byte_length;
    }
    let json = serde_json::to_vec(&Value::Object(header))?;
    let json_len = u32::try_from(json.len()).map_err(|_| Error::Checkpoint("header exceeds 4 GiB".into()))?;
    let mut out = Vec::with_capacity(12 + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&json_len.to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    let slice = bytes
        .get(at..at + 4)
        .ok_or_else(|| Error::Checkpoint(format!("truncated file: missing {what}")))?;
    Ok(u32::from_le_bytes(slice.try_into().expect("4 bytes")))
}

/// Parses bytes produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    let magic = bytes
        .get(..4)
        .ok_or_else(|| Error::Checkpoint("truncated file: missing magic".into()))?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {magic:02x?}, expected \"PSVT\""
        )));
    }
    let version = read_u32(bytes, 4, "version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (this build reads {VERSION})"
        )));
    }
    let json_len = read_u32(bytes, 8, "header length")? as usize;
    let json = bytes
        .get(12..12 + json_len)
        .ok_or_else(|| Error::Checkpoint(format!("truncated file: header needs {json_len} bytes")))?;
    let blobs = &bytes[12 + json_len..];
    let mut header: Map<String, Value> = serde_json::from_slice(json)?;

    let config: PsVitConfig = serde_json::from_value(
        header
            .shift_remove(CONFIG_KEY)
            .ok_or_else(|| Error::Checkpoint("header lacks __config__".into()))?,
    )?;
    let buffer_names: Vec<String> = match header.shift_remove(BUFFERS_KEY) {
        Some(v) => serde_json::from_value(v)?,
        None => Vec::new(),
    };

    let mut params = IndexMap::new();
    let mut buffers = IndexMap::new();
    let mut expected_offset = 0u64;
    for (path, value) in header {
        let entry: TensorEntry = serde_json::from_value(value)?;
        if entry.dtype != "f32" {
            return Err(Error::Checkpoint(format!(
                "{path}: unsupported dtype {:?}",
                entry.dtype
            )));
        }
        let count: usize = entry.shape.iter().product();
        if entry.byte_length != 4 * count as u64 || entry.offset != expected_offset {
            return Err(Error::Checkpoint(format!(
                "{path}: inconsistent layout (offset {}, byte_length {} for shape {:?})",
                entry.offset, entry.byte_length, entry.shape
            )));
        }
        let (start, end) = (entry.offset as usize, (entry.offset + entry.byte_length) as usize);
        let raw = blobs.get(start..end).ok_or_else(|| {
            Error::Checkpoint(format!(
                "truncated file: {path} needs bytes {start}..{end} of {} blob bytes",
                blobs.len()
            ))
        })?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let tensor = Tensor::new(&entry.shape, data).map_err(|e| Error::Checkpoint(format!("{path}: {e}")))?;
        if buffer_names.contains(&path) {
            buffers.insert(path, tensor);
        } else {
            params.insert(path, tensor);
        }
        expected_offset += entry.byte_length;
    }
    if blobs.len() as u64 != expected_offset {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            blobs.len() as u64 - expected_offset
        )));
    }
    if let Some(missing) = buffer_names.iter().find(|n| !buffers.contains_key(*n)) {
        return Err(Error::Checkpoint(format!("buffer {missing} listed but not stored")));
    }
    Ok(ParamStore {
        config,
        params,
        buffers,
    })
}

/// Writes via a temporary sibling file and a rename, so readers never see
/// a partial checkpoint.
pub fn save(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(store)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamStore> {
    decode(&fs::read(path)?)
}
