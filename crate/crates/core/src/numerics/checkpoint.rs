//! Parameter checkpoints: `<stem>.bin` holds every parameter as little-endian
//! f32, concatenated in registry order; `<stem>.json` lists `{name, shape, offset}`
//! per parameter, with `offset` in bytes into the `.bin` file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{NumericsError, ParamStore, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub params: Vec<ManifestEntry>,
}

pub fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("json"))
}

pub fn save(store: &ParamStore, stem: &Path) -> Result<(), NumericsError> {
    let (bin, json) = paths(stem);
    let mut bytes = Vec::with_capacity(store.num_scalars() * 4);
    let mut params = Vec::with_capacity(store.len());
    for id in store.ids() {
        let t = store.get(id);
        params.push(ManifestEntry {
            name: store.name(id).to_string(),
            shape: t.shape().to_vec(),
            offset: bytes.len(),
        });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        params,
    };
    let io = |path: &Path| {
        let p = path.display().to_string();
        move |e: std::io::Error| NumericsError::Io(p.clone(), e.to_string())
    };
    fs::write(&bin, &bytes).map_err(io(&bin))?;
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| NumericsError::Corrupt(e.to_string()))?;
    fs::write(&json, text).map_err(io(&json))?;
    Ok(())
}

/// Reads a checkpoint as `(name, tensor)` pairs in file order.
pub fn read(stem: &Path) -> Result<Vec<(String, Tensor)>, NumericsError> {
    let (bin, json) = paths(stem);
    let text = fs::read_to_string(&json).map_err(|e| NumericsError::Io(json.display().to_string(), e.to_string()))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| NumericsError::Corrupt(format!("{}: {e}", json.display())))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(NumericsError::Corrupt(format!(
            "{}: checkpoint version {} (expected {CHECKPOINT_VERSION})",
            json.display(),
            manifest.version
        )));
    }
    let bytes = fs::read(&bin).map_err(|e| NumericsError::Io(bin.display().to_string(), e.to_string()))?;
    let mut out = Vec::with_capacity(manifest.params.len());
    let mut expected_end = 0;
    for entry in manifest.params {
        let n: usize = entry.shape.iter().product();
        let end = entry.offset + 4 * n;
        if entry.offset != expected_end || end > bytes.len() {
            return Err(NumericsError::Corrupt(format!(
                "{}: parameter {} spans bytes {}..{end} of {}",
                bin.display(),
                entry.name,
                entry.offset,
                bytes.len()
            )));
        }
        let data = bytes[entry.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((entry.name, Tensor::new(&entry.shape, data)?));
        expected_end = end;
    }
    if expected_end != bytes.len() {
        return Err(NumericsError::Corrupt(format!(
            "{}: {} trailing bytes",
            bin.display(),
            bytes.len() - expected_end
        )));
    }
    Ok(out)
}

/// Overwrites `store` from a checkpoint; names and shapes must match exactly.
pub fn load_into(store: &mut ParamStore, stem: &Path) -> Result<(), NumericsError> {
    let entries = read(stem)?;
    if entries.len() != store.len() {
        return Err(NumericsError::CheckpointMismatch(format!(
            "checkpoint has {} parameters, model has {}",
            entries.len(),
            store.len()
        )));
    }
    for (id, (name, tensor)) in store.ids().collect::<Vec<_>>().into_iter().zip(entries) {
        if store.name(id) != name || store.get(id).shape() != tensor.shape() {
            return Err(NumericsError::CheckpointMismatch(format!(
                "parameter {} {:?} vs checkpoint {} {:?}",
                store.name(id),
                store.get(id).shape(),
                name,
                tensor.shape()
            )));
        }
        *store.get_mut(id) = tensor;
    }
    Ok(())
}
