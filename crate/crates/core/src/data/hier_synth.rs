//! Synthetic hierarchical sums: bottom series built from a class-shared
//! factor, a per-series trend and seasonality, and noise; every upper node
//! is the exact sum of the leaves below it.

use serde::{Deserialize, Serialize};

use super::SceneRecord;
use crate::model::{ClassAssignment, HierarchyTree};
use crate::numerics::rng::{derive_seed, seeded, standard_normal};
use crate::numerics::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HierSynthConfig {
    /// Children per node at each depth; `fanouts.len() + 1` levels.
    pub fanouts: Vec<usize>,
    /// Total series length `T`.
    pub length: usize,
    /// Forecast horizon `τ`.
    pub horizon: usize,
    /// Input window length.
    pub t_in: usize,
    pub season_period: usize,
    pub factor_scale: f64,
    pub trend_scale: f64,
    pub season_scale: f64,
    pub noise: f64,
}

impl Default for HierSynthConfig {
    fn default() -> Self {
        HierSynthConfig {
            fanouts: vec![3, 4, 4],
            length: 120,
            horizon: 8,
            t_in: 24,
            season_period: 12,
            factor_scale: 1.0,
            trend_scale: 0.01,
            season_scale: 0.5,
            noise: 0.1,
        }
    }
}

impl HierSynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fanouts.len() < 2 || self.fanouts.contains(&0) {
            return Err(Error::Config("hierarchy needs at least 3 levels and positive fan-outs".into()));
        }
        if self.horizon == 0 || self.t_in == 0 || self.season_period == 0 {
            return Err(Error::Config("horizon, t_in and season_period must be positive".into()));
        }
        if self.t_in + 3 * self.horizon > self.length {
            return Err(Error::Config(format!(
                "length {} too short for t_in {} and three horizons of {}",
                self.length, self.t_in, self.horizon
            )));
        }
        Ok(())
    }
}

/// A full generated hierarchy with its split windows.
#[derive(Debug, Clone, PartialEq)]
pub struct HierSynthData {
    pub tree: HierarchyTree,
    /// Every node's series, `[N, T]`, node order of `tree`.
    pub series: Tensor<f64>,
    /// Class (depth-1 ancestor) of each bottom series.
    pub labels: ClassAssignment,
    pub train: Vec<SceneRecord>,
    pub val: Vec<SceneRecord>,
    pub test: Vec<SceneRecord>,
}

fn window(cfg: &HierSynthConfig, data: &HierSynthData, leaves: &[usize], end_in: usize, id: String, seed: u64) -> Result<SceneRecord> {
    let s = leaves.len();
    let (t_in, h) = (cfg.t_in, cfg.horizon);
    let mut x = Tensor::zeros(&[s, t_in, 1]);
    let mut y = Tensor::zeros(&[s, h, 1]);
    for (b, &node) in leaves.iter().enumerate() {
        for t in 0..t_in {
            x.set(&[b, t, 0], data.series.at(&[node, end_in - t_in + t]));
        }
        for t in 0..h {
            y.set(&[b, t, 0], data.series.at(&[node, end_in + t]));
        }
    }
    Ok(SceneRecord {
        id,
        seed,
        x,
        y,
        labels: data.labels.clone(),
        tree: Some(data.tree.clone()),
    })
}

/// Generates the hierarchy and splits it in time: training windows lie in
/// the first `T − 2τ` steps, validation targets are the next `τ` steps and
/// test targets the final `τ`.
pub fn generate_hier_synth(cfg: &HierSynthConfig, seed: u64) -> Result<HierSynthData> {
    cfg.validate()?;
    let tree = HierarchyTree::from_fanouts(&cfg.fanouts)?;
    let n = tree.n_nodes();
    let t_len = cfg.length;
    let leaves: Vec<usize> = {
        let mut l: Vec<(usize, usize)> = (0..n).filter_map(|i| tree.leaf_series(i).map(|b| (b, i))).collect();
        l.sort_unstable();
        l.into_iter().map(|(_, i)| i).collect()
    };
    let classes: Vec<usize> = leaves.iter().map(|&node| tree.ancestor_at(node, 1)).collect();

    // class factors: AR(1) paths shared by every leaf of the class
    let mut factor_rng = seeded(derive_seed(seed, 0));
    let class_nodes: Vec<usize> = (0..n).filter(|&i| tree.depth(i) == 1).collect();
    let mut factors = vec![vec![0.0; t_len]; n];
    for &c in &class_nodes {
        let mut v = 0.0;
        for t in 0..t_len {
            v = 0.9 * v + cfg.factor_scale * standard_normal(&mut factor_rng) * 0.3;
            factors[c][t] = v;
        }
    }

    let mut series = Tensor::zeros(&[n, t_len]);
    let period = cfg.season_period as f64;
    for (b, &node) in leaves.iter().enumerate() {
        let mut rng = seeded(derive_seed(seed, 1 + b as u64));
        let level = 2.0 + standard_normal(&mut rng).abs();
        let slope = cfg.trend_scale * standard_normal(&mut rng);
        let phase = std::f64::consts::TAU * rng_unit(&mut rng);
        let amp = cfg.season_scale * (0.5 + rng_unit(&mut rng));
        for t in 0..t_len {
            let tf = t as f64;
            let v = level
                + slope * tf
                + amp * (std::f64::consts::TAU * tf / period + phase).sin()
                + factors[classes[b]][t]
                + cfg.noise * standard_normal(&mut rng);
            series.set(&[node, t], v);
        }
    }
    // upper nodes: exact sums in ascending leaf order
    let groups = tree.aggregation_groups();
    for node in 0..n {
        if tree.leaf_series(node).is_some() {
            continue;
        }
        for t in 0..t_len {
            let mut acc = 0.0;
            for &b in &groups[node] {
                acc += series.at(&[leaves[b], t]);
            }
            series.set(&[node, t], acc);
        }
    }

    let labels = ClassAssignment::new(classes.iter().map(|c| format!("node{c}")))?;
    let mut data = HierSynthData {
        tree,
        series,
        labels,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    let h = cfg.horizon;
    let train_end = t_len - 2 * h;
    let mut train = Vec::new();
    for end_in in cfg.t_in..=train_end - h {
        train.push(window(cfg, &data, &leaves, end_in, format!("hier-{seed:x}-train-{end_in}"), seed)?);
    }
    let val = vec![window(cfg, &data, &leaves, train_end, format!("hier-{seed:x}-val"), seed)?];
    let test = vec![window(cfg, &data, &leaves, t_len - h, format!("hier-{seed:x}-test"), seed)?];
    data.train = train;
    data.val = val;
    data.test = test;
    Ok(data)
}

fn rng_unit(rng: &mut impl rand::Rng) -> f64 {
    rng.random::<f64>()
}
