//! Dataset directory format.
//!
//! ```text
//! <dir>/manifest.json     versioned header with config echo and counts
//! <dir>/index.ndjson      one line per scene, in split order
//! <dir>/scenes/<id>.bin   x then y, row-major [S, T, D], little-endian f64
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DataSpec, SceneRecord, SplitSizes};
use crate::model::{ClassAssignment, HierarchyTree};
use crate::numerics::{Real, Tensor};
use crate::{Error, Result};

pub const DATASET_VERSION: u32 = 1;
const SCHEMA: &str = "hiperformer-dataset";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub schema: String,
    pub tool_version: String,
    pub byte_order: String,
    pub layout: String,
    pub master_seed: u64,
    pub spec: DataSpec,
    pub counts: SplitSizes,
    pub t_in: usize,
    pub t_out: usize,
    pub d_in: usize,
    pub d_out: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<SceneRecord>,
    pub val: Vec<SceneRecord>,
    pub test: Vec<SceneRecord>,
}

impl Dataset {
    pub fn new(spec: DataSpec, master_seed: u64, train: Vec<SceneRecord>, val: Vec<SceneRecord>, test: Vec<SceneRecord>) -> Self {
        let first = train.first().or(val.first()).or(test.first());
        let dims = |r: &SceneRecord| (r.x.shape()[1], r.y.shape()[1], r.x.shape()[2], r.y.shape()[2]);
        let (t_in, t_out, d_in, d_out) = first.map(dims).unwrap_or((0, 0, 0, 0));
        Dataset {
            manifest: DatasetManifest {
                format_version: DATASET_VERSION,
                schema: SCHEMA.into(),
                tool_version: env!("CARGO_PKG_VERSION").into(),
                byte_order: "little-endian".into(),
                layout: "row-major [S, T, D]; x then y".into(),
                master_seed,
                spec,
                counts: SplitSizes {
                    train: train.len(),
                    val: val.len(),
                    test: test.len(),
                },
                t_in,
                t_out,
                d_in,
                d_out,
            },
            train,
            val,
            test,
        }
    }

    pub fn split(&self, name: &str) -> Result<&[SceneRecord]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }

    pub fn all(&self) -> impl Iterator<Item = (&'static str, &SceneRecord)> {
        self.train
            .iter()
            .map(|r| ("train", r))
            .chain(self.val.iter().map(|r| ("val", r)))
            .chain(self.test.iter().map(|r| ("test", r)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndexEntry {
    id: String,
    split: String,
    seed: u64,
    blob: String,
    x_shape: Vec<usize>,
    y_shape: Vec<usize>,
    labels: ClassAssignment,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tree: Option<HierarchyTree>,
    sha256: String,
}

fn fmt_err(what: &str, detail: impl ToString) -> Error {
    Error::Format {
        what: what.into(),
        detail: detail.to_string(),
    }
}

fn safe_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.') && !id.starts_with('.')
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let scenes = dir.join("scenes");
    fs::create_dir_all(&scenes).map_err(|e| Error::io(&scenes, e))?;
    let mut index = Vec::new();
    for (split, r) in ds.all() {
        r.validate()?;
        if !safe_id(&r.id) {
            return Err(Error::Scene {
                scene: r.id.clone(),
                detail: "id is not usable as a file name".into(),
            });
        }
        let mut blob = Vec::with_capacity((r.x.len() + r.y.len()) * 8);
        for &v in r.x.data().iter().chain(r.y.data()) {
            v.write_le(&mut blob);
        }
        let rel = format!("scenes/{}.bin", r.id);
        let path = dir.join(&rel);
        fs::write(&path, &blob).map_err(|e| Error::io(&path, e))?;
        let entry = IndexEntry {
            id: r.id.clone(),
            split: split.into(),
            seed: r.seed,
            blob: rel,
            x_shape: r.x.shape().to_vec(),
            y_shape: r.y.shape().to_vec(),
            labels: r.labels.clone(),
            tree: r.tree.clone(),
            sha256: hex::encode(Sha256::digest(&blob)),
        };
        index.push(serde_json::to_string(&entry).map_err(|e| fmt_err("index", e))?);
    }
    let path = dir.join("index.ndjson");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    for line in index {
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&ds.manifest).map_err(|e| fmt_err("manifest", e))?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(())
}

pub fn read_dataset_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| fmt_err("dataset manifest", e))?;
    // check the version before the schema so newer layouts fail explicitly
    let version = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| fmt_err("dataset manifest", "missing format_version"))?;
    if version != DATASET_VERSION as u64 {
        return Err(Error::UnsupportedVersion {
            what: "dataset",
            found: version.min(u32::MAX as u64) as u32,
            expected: DATASET_VERSION,
        });
    }
    let manifest: DatasetManifest = serde_json::from_value(value).map_err(|e| fmt_err("dataset manifest", e))?;
    if manifest.schema != SCHEMA {
        return Err(fmt_err("dataset manifest", format!("unexpected schema {:?}", manifest.schema)));
    }
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_dataset_manifest(dir)?;
    let path = dir.join("index.ndjson");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (line_no, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let e: IndexEntry = serde_json::from_str(line).map_err(|err| fmt_err("dataset index", format!("line {}: {err}", line_no + 1)))?;
        let scene_err = |detail: String| Error::Scene {
            scene: e.id.clone(),
            detail,
        };
        if !safe_id(&e.id) || e.blob != format!("scenes/{}.bin", e.id) {
            return Err(scene_err(format!("unexpected blob path {:?}", e.blob)));
        }
        let blob_path = dir.join(&e.blob);
        let bytes = fs::read(&blob_path).map_err(|err| scene_err(format!("{}: {err}", blob_path.display())))?;
        let nx: usize = e.x_shape.iter().product();
        let ny: usize = e.y_shape.iter().product();
        if bytes.len() != (nx + ny) * 8 {
            return Err(scene_err(format!(
                "blob holds {} bytes, shapes {:?} and {:?} need {}",
                bytes.len(),
                e.x_shape,
                e.y_shape,
                (nx + ny) * 8
            )));
        }
        if hex::encode(Sha256::digest(&bytes)) != e.sha256 {
            return Err(scene_err("blob checksum mismatch".into()));
        }
        let vals: Vec<f64> = bytes.chunks_exact(8).map(f64::read_le).collect();
        let x = Tensor::new(e.x_shape.clone(), vals[..nx].to_vec()).map_err(|err| scene_err(err.to_string()))?;
        let y = Tensor::new(e.y_shape.clone(), vals[nx..].to_vec()).map_err(|err| scene_err(err.to_string()))?;
        let record = SceneRecord {
            id: e.id.clone(),
            seed: e.seed,
            x,
            y,
            labels: e.labels.clone(),
            tree: e.tree.clone(),
        };
        record.validate()?;
        match e.split.as_str() {
            "train" => train.push(record),
            "val" => val.push(record),
            "test" => test.push(record),
            other => return Err(scene_err(format!("unknown split {other:?}"))),
        }
    }
    let counts = SplitSizes {
        train: train.len(),
        val: val.len(),
        test: test.len(),
    };
    if counts != manifest.counts {
        return Err(fmt_err("dataset", format!("index lists {counts:?}, manifest says {:?}", manifest.counts)));
    }
    Ok(Dataset {
        manifest,
        train,
        val,
        test,
    })
}
