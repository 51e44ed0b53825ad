//! Weight checkpoints.
//!
//! Layout (compatible with the safetensors container):
//!
//! ```text
//! u64 little-endian   header length L
//! L bytes             JSON header, space-padded to a multiple of 8
//! ...                 tensor data, f32 little-endian, row-major
//! ```
//!
//! The header maps every parameter name to
//! `{"dtype": "F32", "shape": [rows, cols], "data_offsets": [begin, end]}`
//! with offsets relative to the start of the data section. The reserved key
//! `__metadata__` holds `{"format": "amped-sed", "config": "<SedConfig JSON>"}`.

use std::path::Path;

use serde_json::{json, Map, Value};

use super::{param_shapes, ModelError, Result, SedConfig, SedModel};
use crate::tensor::{Matrix, ParamStore};

const FORMAT: &str = "amped-sed";

fn encode(model: &SedModel<f32>) -> Result<Vec<u8>> {
    let mut header = Map::new();
    let mut offset = 0usize;
    for (_, name, m) in model.params().iter() {
        let end = offset + 4 * m.len();
        header.insert(
            name.to_string(),
            json!({"dtype": "F32", "shape": [m.rows(), m.cols()], "data_offsets": [offset, end]}),
        );
        offset = end;
    }
    let config = serde_json::to_string(model.config())
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    header.insert(
        "__metadata__".into(),
        json!({"format": FORMAT, "config": config}),
    );
    let mut text = Value::Object(header).to_string().into_bytes();
    while text.len() % 8 != 0 {
        text.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + text.len() + offset);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    for (_, _, m) in model.params().iter() {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<SedModel<f32>> {
    let bad = |m: String| ModelError::Checkpoint(m);
    if bytes.len() < 8 {
        return Err(bad("file shorter than its length prefix".into()));
    }
    let len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(8..8usize.saturating_add(len))
        .ok_or_else(|| bad(format!("header length {len} exceeds file size")))?;
    let data = &bytes[8 + len..];
    let header: Map<String, Value> =
        serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
    let meta = header
        .get("__metadata__")
        .ok_or_else(|| bad("no __metadata__ entry".into()))?;
    if meta.get("format").and_then(Value::as_str) != Some(FORMAT) {
        return Err(bad("not an amped-sed checkpoint".into()));
    }
    let config: SedConfig = meta
        .get("config")
        .and_then(Value::as_str)
        .ok_or_else(|| bad("metadata lacks a config".into()))
        .and_then(|s| serde_json::from_str(s).map_err(|e| bad(format!("config: {e}"))))?;
    config.validate()?;

    let mut store = ParamStore::new();
    for (name, (rows, cols)) in param_shapes(&config) {
        let entry = header
            .get(&name)
            .ok_or_else(|| bad(format!("missing parameter {name}")))?;
        if entry.get("dtype").and_then(Value::as_str) != Some("F32") {
            return Err(bad(format!("{name}: only F32 tensors are supported")));
        }
        let dims: Vec<usize> = serde_json::from_value(entry["shape"].clone())
            .map_err(|e| bad(format!("{name} shape: {e}")))?;
        if dims != [rows, cols] {
            return Err(bad(format!(
                "{name} has shape {dims:?}, expected [{rows}, {cols}]"
            )));
        }
        let [begin, end]: [usize; 2] = serde_json::from_value(entry["data_offsets"].clone())
            .map_err(|e| bad(format!("{name} offsets: {e}")))?;
        if end < begin || end - begin != 4 * rows * cols || end > data.len() {
            return Err(bad(format!("{name}: data offsets out of range")));
        }
        let values = data[begin..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        store.insert(name, Matrix::new(rows, cols, values)?);
    }
    let extra = header.len() - 1 - store.len();
    if extra != 0 {
        return Err(bad(format!("{extra} unexpected tensors in checkpoint")));
    }
    SedModel::from_params(config, store)
}

pub fn save_checkpoint(model: &SedModel<f32>, path: impl AsRef<Path>) -> crate::Result<()> {
    let path = path.as_ref();
    let bytes = encode(model)?;
    std::fs::write(path, bytes).map_err(|e| crate::Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> crate::Result<SedModel<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| crate::Error::io(path, e))?;
    Ok(decode(&bytes)?)
}
