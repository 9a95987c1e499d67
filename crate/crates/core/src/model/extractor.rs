//! The hierarchical feature extractor.
//!
//! Internally series live in a compact class-major layout `[S, T, d]`:
//! rows of one class are contiguous and padded slots never exist past the
//! input boundary, so attention only ever sees real series.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::grouping::{group_and_pad, ClassAssignment, ClassLayout, GroupedSeriesTensor};
use crate::attention::{AttentionConfig, Pma, Sab, SetBlock, SetBlockKind};
use crate::layers::Linear;
use crate::numerics::{ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Variant {
    /// Series, class and time attention.
    #[default]
    #[serde(rename = "full")]
    Full,
    /// No class attention; every series treated as one class.
    #[serde(rename = "wo-class", alias = "w/o-class")]
    WoClass,
    /// Time attention only.
    #[serde(rename = "att-t", alias = "attT")]
    AttT,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WoClass => "wo-class",
            Variant::AttT => "att-t",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Variant::Full),
            "wo-class" | "w/o-class" | "woclass" => Ok(Variant::WoClass),
            "att-t" | "attt" => Ok(Variant::AttT),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

fn default_n_layers() -> usize {
    2
}
fn default_d_model() -> usize {
    64
}
fn default_n_heads() -> usize {
    4
}
fn default_kernel_dim() -> usize {
    16
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_n_layers")]
    pub n_layers: usize,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_n_heads")]
    pub n_heads: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub d_in: usize,
    pub d_out: usize,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub set_block: SetBlockKind,
    /// Width of each covariance kernel feature map.
    #[serde(default = "default_kernel_dim")]
    pub kernel_dim: usize,
}

impl ModelConfig {
    pub fn new(t_in: usize, t_out: usize, d_in: usize, d_out: usize) -> Self {
        ModelConfig {
            n_layers: default_n_layers(),
            d_model: default_d_model(),
            n_heads: default_n_heads(),
            t_in,
            t_out,
            d_in,
            d_out,
            variant: Variant::Full,
            set_block: SetBlockKind::Sab,
            kernel_dim: default_kernel_dim(),
        }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be at least 1".into()));
        }
        self.validate_shapes()
    }

    /// Everything except the layer count, which may be zero for probes.
    fn validate_shapes(&self) -> Result<()> {
        self.attention().validate()?;
        for (name, v) in [
            ("t_in", self.t_in),
            ("t_out", self.t_out),
            ("d_in", self.d_in),
            ("d_out", self.d_out),
            ("kernel_dim", self.kernel_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if let SetBlockKind::Isab { inducing: 0 } = self.set_block {
            return Err(Error::Config("ISAB needs at least one inducing point".into()));
        }
        Ok(())
    }
}

/// `[T, d]` sinusoidal code: even channels `sin(t / 10000^(2i/d))`, odd
/// channels the matching cosine.
pub fn time_encoding<F: Real>(t: usize, d: usize) -> Tensor<F> {
    Tensor::from_fn(&[t, d], |flat| {
        let (pos, ch) = (flat / d, flat % d);
        let freq = 10000f64.powf(-((ch - ch % 2) as f64) / d as f64);
        let angle = pos as f64 * freq;
        F::c(if ch % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Per-class sets `[T, n_c, d]` cut from a compact `[S, T, d]` tensor.
fn class_sets<F: Real>(tape: &mut Tape<F>, m: Var, layout: &ClassLayout) -> Result<Vec<Var>> {
    if layout.n_classes() == 1 {
        return Ok(vec![tape.permute(m, &[1, 0, 2])?]);
    }
    layout
        .class_ranges()
        .into_iter()
        .map(|r| {
            let rows: Vec<usize> = r.collect();
            let x = tape.select_rows(m, &rows)?;
            tape.permute(x, &[1, 0, 2])
        })
        .collect()
}

/// Set attention across the real series of each class, at every time step.
/// `m` is compact `[S, T, d]`; the output has the same layout.
pub fn self_att_sc<F: Real>(tape: &mut Tape<F>, block: &SetBlock, m: Var, layout: &ClassLayout) -> Result<Var> {
    let sets = class_sets(tape, m, layout)?;
    let mut parts = Vec::with_capacity(sets.len());
    for x in sets {
        let y = block.forward(tape, x)?;
        parts.push(tape.permute(y, &[1, 0, 2])?);
    }
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        tape.concat(&parts)
    }
}

/// Class summaries by attention pooling, set attention across classes at
/// every time step, then broadcast back to each class's series.
pub fn self_att_c<F: Real>(
    tape: &mut Tape<F>,
    pool: &Pma,
    block: &SetBlock,
    m: Var,
    layout: &ClassLayout,
) -> Result<Var> {
    let sets = class_sets(tape, m, layout)?;
    let mut summaries = Vec::with_capacity(sets.len());
    for x in sets {
        let p = pool.forward(tape, x)?; // [T, 1, d]
        summaries.push(tape.permute(p, &[1, 0, 2])?);
    }
    let mp = if summaries.len() == 1 {
        summaries[0]
    } else {
        tape.concat(&summaries)?
    }; // [C, T, d]
    let across = tape.permute(mp, &[1, 0, 2])?;
    let mixed = block.forward(tape, across)?;
    let back = tape.permute(mixed, &[1, 0, 2])?;
    tape.select_rows(back, &layout.class_of_compact_row())
}

/// Full self-attention along time for each series independently.
pub fn self_att_t<F: Real>(tape: &mut Tape<F>, block: &Sab, m: Var) -> Result<Var> {
    block.forward(tape, m)
}

/// One 3D self-attention layer.
#[derive(Debug, Clone)]
pub struct HierLayer {
    pub series: Option<SetBlock>,
    pub class: Option<(Pma, SetBlock)>,
    pub time: Sab,
}

impl HierLayer {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let att = config.attention();
        let series = match config.variant {
            Variant::AttT => None,
            _ => Some(SetBlock::new(store, &format!("{name}.series"), att, config.set_block, rng)?),
        };
        let class = match config.variant {
            Variant::Full => Some((
                Pma::new(store, &format!("{name}.class_pool"), att, 1, rng),
                SetBlock::new(store, &format!("{name}.class"), att, config.set_block, rng)?,
            )),
            _ => None,
        };
        Ok(HierLayer {
            series,
            class,
            time: Sab::new(store, &format!("{name}.time"), att, rng),
        })
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, m: Var, layout: &ClassLayout) -> Result<Var> {
        let mut mt = match &self.series {
            Some(block) => self_att_sc(tape, block, m, layout)?,
            None => m,
        };
        if let Some((pool, block)) = &self.class {
            let mc = self_att_c(tape, pool, block, m, layout)?;
            mt = tape.add(mt, mc)?;
        }
        self_att_t(tape, &self.time, mt)
    }
}

#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub config: ModelConfig,
    pub embed: Linear,
    pub layers: Vec<HierLayer>,
    /// `[T_out, T_in]` weights and `[T_out, 1, 1]` bias of the time pooling.
    pub pool_weight: ParamId,
    pub pool_bias: ParamId,
}

impl FeatureExtractor {
    /// Accepts `n_layers = 0`, which leaves a purely per-series map.
    pub fn new<F: Real>(store: &mut ParamStore<F>, config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate_shapes()?;
        let embed = Linear::new(store, "embed", config.d_in, config.d_model, rng);
        let layers = (0..config.n_layers)
            .map(|i| HierLayer::new(store, &format!("layer{i}"), &config, rng))
            .collect::<Result<Vec<_>>>()?;
        let pool_weight = store.add_glorot("time_pool.weight", &[config.t_out, config.t_in], config.t_in, config.t_out, rng);
        let pool_bias = store.add_zeros("time_pool.bias", &[config.t_out, 1, 1]);
        Ok(FeatureExtractor {
            config,
            embed,
            layers,
            pool_weight,
            pool_bias,
        })
    }

    /// Slot-wise affine map `D_in -> d_model` plus the time code.
    pub fn embed<F: Real>(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.config.d_in {
            return Err(Error::shape("embed", format!("expected [n, T, {}], got {s:?}", self.config.d_in)));
        }
        let h = self.embed.forward(tape, x)?;
        let code = tape.constant(time_encoding(s[1], self.config.d_model));
        tape.add_broadcast(h, code)
    }

    /// Learned affine combination of input time steps: `[S, T_in, d]` to
    /// `[S, T_out, d]`, shared over series and channels.
    pub fn pool_time<F: Real>(&self, tape: &mut Tape<F>, m: Var) -> Result<Var> {
        let s = tape.shape(m).to_vec();
        let (n, d) = (s[0], s[2]);
        let t_out = self.config.t_out;
        let x = tape.permute(m, &[1, 0, 2])?;
        let x = tape.reshape(x, &[s[1], n * d])?;
        let w = tape.param(self.pool_weight);
        let y = tape.matmul(w, x)?;
        let y = tape.reshape(y, &[t_out, n, d])?;
        let b = tape.param(self.pool_bias);
        let y = tape.add_broadcast(y, b)?;
        tape.permute(y, &[1, 0, 2])
    }

    /// Per-series features `[S, T_out, d_model]`, rows in input order.
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, x: &Tensor<F>, c: &ClassAssignment) -> Result<Var> {
        let grouped = group_and_pad(x, c)?;
        self.forward_grouped(tape, &grouped)
    }

    pub fn forward_grouped<F: Real>(&self, tape: &mut Tape<F>, g: &GroupedSeriesTensor<F>) -> Result<Var> {
        let s = g.values.shape();
        if s[2] != self.config.t_in || s[3] != self.config.d_in {
            return Err(Error::shape(
                "extract_features",
                format!("expected series [{}, {}], got [{}, {}]", self.config.t_in, self.config.d_in, s[2], s[3]),
            ));
        }
        let layout = match self.config.variant {
            Variant::Full => g.layout.clone(),
            Variant::WoClass | Variant::AttT => g.layout.merged(),
        };
        let x = tape.constant(g.values.clone());
        let x = tape.reshape(x, &[s[0] * s[1], s[2], s[3]])?;
        let x = tape.select_rows(x, &g.layout.real_slots())?;
        let mut m = self.embed(tape, x)?;
        for layer in &self.layers {
            m = layer.forward(tape, m, &layout)?;
        }
        let m = tape.select_rows(m, &layout.compact_row_of_series())?;
        self.pool_time(tape, m)
    }
}
