//! Checkpoints: a directory with `manifest.json` and `params.bin`, a flat
//! little-endian blob of every parameter in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{HiPerformer, ModelConfig};
use crate::dist::{JITTER_FLOOR, JITTER_REL};
use crate::numerics::{Real, Tensor};
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const BLOB: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub tool_version: String,
    pub precision: String,
    pub config: ModelConfig,
    pub jitter_rel: f64,
    pub jitter_floor: f64,
    pub params: Vec<ParamEntry>,
    pub blob_sha256: String,
    /// Free-form provenance (config hash, seed, epoch, validation loss).
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint".into(),
        detail: detail.into(),
    }
}

pub fn save_checkpoint<F: Real>(
    model: &HiPerformer<F>,
    dir: &Path,
    meta: BTreeMap<String, serde_json::Value>,
) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::with_capacity(model.store.num_values() * F::BYTES);
    let mut params = Vec::new();
    for p in model.store.iter() {
        for &v in p.value.data() {
            v.write_le(&mut blob);
        }
        params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
        });
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        precision: F::NAME.to_string(),
        config: model.config,
        jitter_rel: JITTER_REL,
        jitter_floor: JITTER_FLOOR,
        params,
        blob_sha256: hex::encode(Sha256::digest(&blob)),
        meta,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| format_err(e.to_string()))?;
    let blob_path = dir.join(BLOB);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let manifest_path = dir.join(MANIFEST);
    fs::write(&manifest_path, json + "\n").map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| format_err(e.to_string()))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            what: "checkpoint",
            found: manifest.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    Ok(manifest)
}

/// Rebuilds the model from the manifest config and loads every parameter.
/// Values stored at the other precision are converted.
pub fn load_checkpoint<F: Real>(dir: &Path) -> Result<(HiPerformer<F>, CheckpointManifest)> {
    let manifest = read_manifest(dir)?;
    let width = match manifest.precision.as_str() {
        "f64" => 8,
        "f32" => 4,
        other => return Err(format_err(format!("unknown precision {other:?}"))),
    };
    let path = dir.join(BLOB);
    let blob = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if hex::encode(Sha256::digest(&blob)) != manifest.blob_sha256 {
        return Err(format_err("parameter blob checksum mismatch"));
    }
    let mut model = HiPerformer::<F>::new_unchecked_depth(manifest.config, 0)?;
    if model.store.len() != manifest.params.len() {
        return Err(format_err(format!(
            "manifest lists {} parameters, model has {}",
            manifest.params.len(),
            model.store.len()
        )));
    }
    let mut offset = 0;
    for entry in &manifest.params {
        let n: usize = entry.shape.iter().product();
        let end = offset + n * width;
        let bytes = blob.get(offset..end).ok_or_else(|| format_err("parameter blob truncated"))?;
        let values: Vec<F> = bytes
            .chunks_exact(width)
            .map(|b| match width {
                8 => F::c(f64::read_le(b)),
                _ => F::c(f32::read_le(b) as f64),
            })
            .collect();
        model.store.load_value(&entry.name, Tensor::new(entry.shape.clone(), values)?)?;
        offset = end;
    }
    if offset != blob.len() {
        return Err(format_err("trailing bytes in parameter blob"));
    }
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        let mut c = ModelConfig::new(4, 2, 3, 2);
        c.d_model = 8;
        c.n_heads = 2;
        c.kernel_dim = 4;
        c
    }

    #[test]
    fn round_trip_is_exact_and_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let model = HiPerformer::<f64>::new(small(), 5).unwrap();
        save_checkpoint(&model, &dir.path().join("a"), BTreeMap::new()).unwrap();
        save_checkpoint(&HiPerformer::<f64>::new(small(), 5).unwrap(), &dir.path().join("b"), BTreeMap::new()).unwrap();
        for f in [MANIFEST, BLOB] {
            assert_eq!(
                fs::read(dir.path().join("a").join(f)).unwrap(),
                fs::read(dir.path().join("b").join(f)).unwrap()
            );
        }
        let (back, _) = load_checkpoint::<f64>(&dir.path().join("a")).unwrap();
        for (p, q) in model.store.iter().zip(back.store.iter()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.value, q.value);
        }
    }

    #[test]
    fn version_and_checksum_are_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let model = HiPerformer::<f32>::new(small(), 1).unwrap();
        save_checkpoint(&model, dir.path(), BTreeMap::new()).unwrap();
        let (as64, m) = load_checkpoint::<f64>(dir.path()).unwrap();
        assert_eq!(m.precision, "f32");
        assert_eq!(as64.store.num_values(), model.store.num_values());

        let blob = dir.path().join(BLOB);
        let mut bytes = fs::read(&blob).unwrap();
        bytes[0] ^= 1;
        fs::write(&blob, &bytes).unwrap();
        assert!(matches!(load_checkpoint::<f32>(dir.path()), Err(Error::Format { .. })));

        let mpath = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&mpath).unwrap().replace("\"version\": 1", "\"version\": 2");
        fs::write(&mpath, text).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(dir.path()),
            Err(Error::UnsupportedVersion { found: 2, .. })
        ));
    }
}
