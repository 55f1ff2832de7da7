//! Checkpoint persistence.
//!
//! Layout: 8 magic bytes, a little-endian u64 manifest length, a JSON
//! manifest (format version, model config, phase tag, seed history, tensor
//! directory in name order), then every tensor's values concatenated as
//! little-endian f64.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Checkpoint, ModelConfig};

const MAGIC: &[u8; 8] = b"ALSCOPE\x01";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    phase_tag: String,
    seed_history: Vec<(String, u64)>,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let tensors: Vec<TensorEntry> = ckpt
        .config
        .schema()
        .into_iter()
        .map(|(name, shape)| TensorEntry { name, shape })
        .collect();
    for t in &tensors {
        let data = ckpt
            .params
            .get(&t.name)
            .ok_or_else(|| Error::Contract(format!("checkpoint missing tensor {}", t.name)))?;
        let expect: usize = t.shape.iter().product();
        if data.len() != expect {
            return Err(Error::ShapeMismatch {
                op: "save_checkpoint",
                left: vec![data.len()],
                right: vec![expect],
            });
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: ckpt.config.clone(),
        phase_tag: ckpt.phase_tag.clone(),
        seed_history: ckpt.seed_history.clone(),
        tensors,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    let blob_len: usize = manifest
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>())
        .sum();
    let mut out = Vec::with_capacity(16 + manifest_bytes.len() + 8 * blob_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    for t in &manifest.tensors {
        for &x in &ckpt.params[&t.name] {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::CheckpointFormat("bad magic".into()));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + mlen {
        return Err(Error::CheckpointFormat("truncated manifest".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + mlen])
        .map_err(|e| Error::CheckpointFormat(format!("manifest parse: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(manifest.format_version));
    }
    manifest.config.validate()?;
    let expected_schema = manifest.config.schema();
    let got_schema: Vec<(String, Vec<usize>)> = manifest
        .tensors
        .iter()
        .map(|t| (t.name.clone(), t.shape.clone()))
        .collect();
    if got_schema != expected_schema {
        return Err(Error::CheckpointFormat(
            "tensor directory does not match the model config".into(),
        ));
    }
    let blob = &bytes[16 + mlen..];
    let need: usize = manifest
        .tensors
        .iter()
        .map(|t| 8 * t.shape.iter().product::<usize>())
        .sum();
    if blob.len() != need {
        return Err(Error::TruncatedBlob {
            expected: need,
            got: blob.len(),
        });
    }
    let mut params = std::collections::BTreeMap::new();
    let mut off = 0usize;
    for t in &manifest.tensors {
        let n: usize = t.shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|i| {
                let s = off + 8 * i;
                f64::from_le_bytes(blob[s..s + 8].try_into().unwrap())
            })
            .collect();
        off += 8 * n;
        params.insert(t.name.clone(), data);
    }
    Ok(Checkpoint {
        config: manifest.config,
        params,
        phase_tag: manifest.phase_tag,
        seed_history: manifest.seed_history,
    })
}
