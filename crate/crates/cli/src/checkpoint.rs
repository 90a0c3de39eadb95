//! Binary checkpoint: `QBT1`, a little-endian u64 manifest length, the JSON
//! manifest, then every tensor as little-endian f64 in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use qbert_core::model::{Model, ModelConfig};
use qbert_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"QBT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the data section.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode(model: &Model) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut offset = 0u64;
    for (name, t) in model.named_params() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 8 * t.numel() as u64;
    }
    let manifest = Manifest {
        config: model.config().clone(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(12 + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.params() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<(ModelConfig, Vec<(String, Tensor)>), String> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err("not a QBT1 checkpoint".into());
    }
    let len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(12..12 + len).ok_or("truncated manifest")?;
    let manifest: Manifest = serde_json::from_slice(body).map_err(|e| format!("bad manifest: {e}"))?;
    let data = &bytes[12 + len..];
    let mut named = Vec::with_capacity(manifest.tensors.len());
    for entry in manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let raw = data
            .get(start..start + 8 * n)
            .ok_or_else(|| format!("tensor {} runs past the end of the file", entry.name))?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(entry.shape, values).map_err(|e| e.to_string())?;
        named.push((entry.name, t));
    }
    Ok((manifest.config, named))
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(&encode(model)).map_err(|e| CliError::io(path, e))
}

/// Config stored in the checkpoint together with its tensors.
pub fn read(path: &Path) -> Result<(ModelConfig, Vec<(String, Tensor)>)> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|m| CliError::parse(path, 0, m))
}

/// Model built from the checkpoint's own config.
pub fn load(path: &Path) -> Result<Model> {
    let (config, named) = read(path)?;
    Ok(Model::from_tensors(config, named)?)
}

/// Model built from `config`, which must agree with the stored tensors.
pub fn load_as(path: &Path, config: &ModelConfig) -> Result<Model> {
    let (stored, named) = read(path)?;
    if stored.heads != config.heads || stored.sources != config.sources {
        return Err(CliError::Incompatible(format!(
            "{}: checkpoint has {} heads and sources {:?}, config asks for {} heads and sources {:?}",
            path.display(),
            stored.heads,
            stored.sources,
            config.heads,
            config.sources
        )));
    }
    Model::from_tensors(config.clone(), named).map_err(|e| match e {
        qbert_core::Error::Incompatible(m) => CliError::Incompatible(format!("{}: {m}", path.display())),
        other => other.into(),
    })
}
