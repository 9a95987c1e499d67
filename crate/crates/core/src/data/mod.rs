//! Scene records, generators, on-disk datasets and standardization.

pub mod charged;
pub mod hier_synth;
pub mod io;
pub mod standardize;

pub use charged::{simulate_charged, ChargeMode, ChargedConfig};
pub use hier_synth::{generate_hier_synth, HierSynthConfig, HierSynthData};
pub use io::{load_dataset, save_dataset, Dataset, DatasetManifest, DATASET_VERSION};
pub use standardize::Standardizer;

use serde::{Deserialize, Serialize};

use crate::model::{ClassAssignment, HierarchyTree};
use crate::numerics::rng::derive_seed;
use crate::numerics::Tensor;
use crate::{Error, Result};

/// One forecasting problem: history `x: [S, T_in, D_in]`, future
/// `y: [S, T_out, D_out]`, class labels and an optional aggregation tree
/// over the `S` bottom series.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub id: String,
    pub seed: u64,
    pub x: Tensor<f64>,
    pub y: Tensor<f64>,
    pub labels: ClassAssignment,
    pub tree: Option<HierarchyTree>,
}

impl SceneRecord {
    pub fn n_series(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let (xs, ys) = (self.x.shape(), self.y.shape());
        let scene_err = |detail: String| Error::Scene {
            scene: self.id.clone(),
            detail,
        };
        if xs.len() != 3 || ys.len() != 3 || xs[0] != ys[0] {
            return Err(scene_err(format!("inputs {xs:?} and targets {ys:?} disagree")));
        }
        if self.labels.len() != xs[0] {
            return Err(scene_err(format!("{} labels for {} series", self.labels.len(), xs[0])));
        }
        if !self.x.is_finite() || !self.y.is_finite() {
            return Err(scene_err("non-finite values".into()));
        }
        if let Some(tree) = &self.tree {
            if tree.n_leaves() != xs[0] {
                return Err(scene_err(format!("tree has {} leaves for {} series", tree.n_leaves(), xs[0])));
            }
        }
        Ok(())
    }

    /// The scene restricted to series `keep`, in that order.
    pub fn subset(&self, keep: &[usize]) -> Result<SceneRecord> {
        if self.tree.is_some() {
            return Err(Error::Protocol("cannot drop series from a scene with a hierarchy".into()));
        }
        Ok(SceneRecord {
            id: self.id.clone(),
            seed: self.seed,
            x: self.x.select_rows(keep)?,
            y: self.y.select_rows(keep)?,
            labels: self.labels.subset(keep)?,
            tree: None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 2000,
            val: 400,
            test: 400,
        }
    }
}

/// Generator choice for a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSpec {
    Charged {
        #[serde(default)]
        charged: ChargedConfig,
        #[serde(default)]
        sizes: SplitSizes,
    },
    HierSynth {
        #[serde(default)]
        hier: HierSynthConfig,
    },
}

/// Charged scenes for every split; scene `k` (counted across splits) uses
/// seed `derive_seed(master_seed, k)`.
pub fn charged_dataset(cfg: &ChargedConfig, sizes: SplitSizes, master_seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut k = 0u64;
    let mut split = |name: &str, n: usize| -> Result<Vec<SceneRecord>> {
        (0..n)
            .map(|i| {
                let seed = derive_seed(master_seed, k);
                k += 1;
                let mut r = simulate_charged(cfg, seed)?;
                r.id = format!("{name}-{i:05}");
                Ok(r)
            })
            .collect()
    };
    let train = split("train", sizes.train)?;
    let val = split("val", sizes.val)?;
    let test = split("test", sizes.test)?;
    let spec = DataSpec::Charged { charged: *cfg, sizes };
    Ok(Dataset::new(spec, master_seed, train, val, test))
}

pub fn hier_dataset(cfg: &HierSynthConfig, master_seed: u64) -> Result<Dataset> {
    let d = generate_hier_synth(cfg, master_seed)?;
    let spec = DataSpec::HierSynth { hier: cfg.clone() };
    Ok(Dataset::new(spec, master_seed, d.train, d.val, d.test))
}

pub fn build_dataset(spec: &DataSpec, master_seed: u64) -> Result<Dataset> {
    match spec {
        DataSpec::Charged { charged, sizes } => charged_dataset(charged, *sizes, master_seed),
        DataSpec::HierSynth { hier } => hier_dataset(hier, master_seed),
    }
}
