//! TOML run configuration. Unknown keys anywhere are errors.
//!
//! ```toml
//! [data]
//! generator = "charged"
//! seed = 1
//! [data.charged]
//! n_particles = 3
//! [data.sizes]
//! train = 100
//! val = 20
//! test = 20
//!
//! [model]
//! d_model = 32
//! variant = "full"
//!
//! [train]
//! epochs = 5
//! loss = "nll"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::SetBlockKind;
use crate::data::{ChargedConfig, DataSpec, DatasetManifest, HierSynthConfig, SplitSizes};
use crate::model::{ModelConfig, Variant};
use crate::train::TrainConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    Charged,
    HierSynth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub generator: GeneratorKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub charged: ChargedConfig,
    #[serde(default)]
    pub sizes: SplitSizes,
    #[serde(default)]
    pub hier: HierSynthConfig,
}

impl DataSection {
    pub fn spec(&self) -> DataSpec {
        match self.generator {
            GeneratorKind::Charged => DataSpec::Charged {
                charged: self.charged,
                sizes: self.sizes,
            },
            GeneratorKind::HierSynth => DataSpec::HierSynth { hier: self.hier.clone() },
        }
    }
}

/// Model hyperparameters; window lengths and widths come from the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub variant: Variant,
    pub set_block: SetBlockKind,
    pub kernel_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::new(1, 1, 1, 1);
        ModelSection {
            n_layers: m.n_layers,
            d_model: m.d_model,
            n_heads: m.n_heads,
            variant: m.variant,
            set_block: m.set_block,
            kernel_dim: m.kernel_dim,
        }
    }
}

impl ModelSection {
    pub fn for_dataset(&self, m: &DatasetManifest) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            t_in: m.t_in,
            t_out: m.t_out,
            d_in: m.d_in,
            d_out: m.d_out,
            variant: self.variant,
            set_block: self.set_block,
            kernel_dim: self.kernel_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Existing dataset directory; when absent, `data` describes one.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub data: Option<DataSection>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative `dataset` or `output` path is taken
    /// relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.dataset, &mut cfg.output].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let Some(d) = &self.data {
            match d.generator {
                GeneratorKind::Charged => d.charged.validate()?,
                GeneratorKind::HierSynth => d.hier.validate()?,
            }
        }
        let probe = self.model.for_dataset(&DatasetManifest {
            format_version: 0,
            schema: String::new(),
            tool_version: String::new(),
            byte_order: String::new(),
            layout: String::new(),
            master_seed: 0,
            spec: DataSpec::Charged {
                charged: ChargedConfig::default(),
                sizes: SplitSizes::default(),
            },
            counts: SplitSizes::default(),
            t_in: 1,
            t_out: 1,
            d_in: 1,
            d_out: 1,
        });
        probe.validate()
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
