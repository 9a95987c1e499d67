//! Forecast metrics, per-level hierarchy tables, and the remove-series
//! protocol.
//!
//! NLL convention: for one scene, the sum over `(t, d)` of the joint
//! Gaussian negative log-likelihood across series; reports average that
//! over scenes.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::data::{SceneRecord, Standardizer};
use crate::dist::GaussianForecast;
use crate::model::{ClassAssignment, HiPerformer, HierarchyTree};
use crate::numerics::rng::{derive_seed, seeded, shuffle};
use crate::numerics::{Real, Tensor};
use crate::{Error, Result};

pub const NLL_CONVENTION: &str = "per-scene sum over (t, d) of the joint negative log-likelihood, averaged over scenes";

fn same(op: &'static str, a: &Tensor<f64>, b: &Tensor<f64>) -> Result<()> {
    if a.shape() != b.shape() || a.rank() != 3 {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn sq_disp(pred: &Tensor<f64>, truth: &Tensor<f64>, i: usize, t: usize) -> f64 {
    let d = pred.shape()[2];
    (0..d)
        .map(|k| {
            let e = pred.at(&[i, t, k]) - truth.at(&[i, t, k]);
            e * e
        })
        .sum()
}

/// Root of the mean over series and time of the squared Euclidean
/// displacement.
pub fn ade(pred: &Tensor<f64>, truth: &Tensor<f64>) -> Result<f64> {
    same("ade", pred, truth)?;
    let s = pred.shape();
    let mut acc = 0.0;
    for i in 0..s[0] {
        for t in 0..s[1] {
            acc += sq_disp(pred, truth, i, t);
        }
    }
    Ok((acc / (s[0] * s[1]) as f64).sqrt())
}

/// Root of the mean over series of the squared displacement at the final
/// step.
pub fn fde(pred: &Tensor<f64>, truth: &Tensor<f64>) -> Result<f64> {
    same("fde", pred, truth)?;
    let s = pred.shape();
    let last = s[1] - 1;
    let acc: f64 = (0..s[0]).map(|i| sq_disp(pred, truth, i, last)).sum();
    Ok((acc / s[0] as f64).sqrt())
}

/// Root mean squared error over every entry.
pub fn rmse(pred: &Tensor<f64>, truth: &Tensor<f64>) -> Result<f64> {
    same("rmse", pred, truth)?;
    let acc: f64 = pred.data().iter().zip(truth.data()).map(|(p, q)| (p - q) * (p - q)).sum();
    Ok((acc / pred.len() as f64).sqrt())
}

pub fn nll_metric(y: &Tensor<f64>, forecast: &GaussianForecast) -> Result<f64> {
    forecast.nll(y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub id: String,
    pub n_series: usize,
    pub ade: f64,
    pub fde: f64,
    pub nll: Option<f64>,
    /// Why the NLL is missing, when it is.
    pub flag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelMetrics {
    pub level: usize,
    pub n_nodes: usize,
    pub rmse: f64,
    /// Mean over nodes of the summed marginal NLL over `(t, d)`.
    pub nll: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n_scenes: usize,
    pub n_flagged: usize,
    pub ade: f64,
    pub fde: f64,
    /// Mean over unflagged scenes; `None` when every scene is flagged.
    pub nll: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scenes: Vec<SceneMetrics>,
    pub aggregate: Aggregate,
    #[serde(default)]
    pub levels: Vec<LevelMetrics>,
    pub nll_convention: String,
    #[serde(default)]
    pub config: serde_json::Value,
}

/// One NDJSON line of a serialized report.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum ReportLine {
    Header {
        nll_convention: String,
        config: serde_json::Value,
    },
    Scene(SceneMetrics),
    Level(LevelMetrics),
    Aggregate(Aggregate),
}

impl MetricReport {
    pub fn from_scenes(scenes: Vec<SceneMetrics>, levels: Vec<LevelMetrics>, config: serde_json::Value) -> Self {
        let n = scenes.len();
        let mean = |f: &dyn Fn(&SceneMetrics) -> f64| {
            if n == 0 {
                f64::NAN
            } else {
                scenes.iter().map(f).sum::<f64>() / n as f64
            }
        };
        let nlls: Vec<f64> = scenes.iter().filter_map(|s| s.nll).collect();
        let aggregate = Aggregate {
            n_scenes: n,
            n_flagged: scenes.iter().filter(|s| s.flag.is_some()).count(),
            ade: mean(&|s| s.ade),
            fde: mean(&|s| s.fde),
            nll: (!nlls.is_empty()).then(|| nlls.iter().sum::<f64>() / nlls.len() as f64),
        };
        MetricReport {
            scenes,
            aggregate,
            levels,
            nll_convention: NLL_CONVENTION.into(),
            config,
        }
    }

    pub fn write_ndjson(&self, mut w: impl Write) -> Result<()> {
        let mut lines = vec![ReportLine::Header {
            nll_convention: self.nll_convention.clone(),
            config: self.config.clone(),
        }];
        lines.extend(self.scenes.iter().cloned().map(ReportLine::Scene));
        lines.extend(self.levels.iter().cloned().map(ReportLine::Level));
        lines.push(ReportLine::Aggregate(self.aggregate.clone()));
        for l in lines {
            let s = serde_json::to_string(&l).map_err(|e| Error::Format {
                what: "metric report".into(),
                detail: e.to_string(),
            })?;
            writeln!(w, "{s}").map_err(|e| Error::io("<metric report>", e))?;
        }
        Ok(())
    }

    pub fn read_ndjson(r: impl BufRead) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            what: "metric report".into(),
            detail,
        };
        let (mut header, mut aggregate) = (None, None);
        let (mut scenes, mut levels) = (Vec::new(), Vec::new());
        for line in r.lines() {
            let line = line.map_err(|e| Error::io("<metric report>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&line).map_err(|e| bad(e.to_string()))? {
                ReportLine::Header { nll_convention, config } => header = Some((nll_convention, config)),
                ReportLine::Scene(s) => scenes.push(s),
                ReportLine::Level(l) => levels.push(l),
                ReportLine::Aggregate(a) => aggregate = Some(a),
            }
        }
        let (nll_convention, config) = header.ok_or_else(|| bad("missing header".into()))?;
        Ok(MetricReport {
            scenes,
            aggregate: aggregate.ok_or_else(|| bad("missing aggregate".into()))?,
            levels,
            nll_convention,
            config,
        })
    }

    /// Tab-separated text for diffing.
    pub fn to_table(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.9e}"));
        let mut out = String::from("scope\tid\tn_series\tade\tfde\tnll\tflag\n");
        for s in &self.scenes {
            let _ = writeln!(
                out,
                "scene\t{}\t{}\t{:.9e}\t{:.9e}\t{}\t{}",
                s.id,
                s.n_series,
                s.ade,
                s.fde,
                opt(s.nll),
                s.flag.as_deref().unwrap_or("-")
            );
        }
        for l in &self.levels {
            let _ = writeln!(out, "level\t{}\t{}\t{:.9e}\t-\t{:.9e}\t-", l.level, l.n_nodes, l.rmse, l.nll);
        }
        let a = &self.aggregate;
        let _ = writeln!(
            out,
            "aggregate\tall\t{}\t{:.9e}\t{:.9e}\t{}\t{}",
            a.n_scenes,
            a.ade,
            a.fde,
            opt(a.nll),
            a.n_flagged
        );
        out
    }
}

/// RMSE of means and marginal NLL grouped by tree depth. `y_all` and the
/// forecast cover every tree node in node order.
pub fn per_level_metrics(y_all: &Tensor<f64>, forecast: &GaussianForecast, tree: &HierarchyTree) -> Result<Vec<LevelMetrics>> {
    let n = tree.n_nodes();
    if y_all.shape() != forecast.mean.shape() || y_all.shape()[0] != n {
        return Err(Error::Structure(format!(
            "{n} tree nodes, targets {:?}, forecast {:?}",
            y_all.shape(),
            forecast.mean.shape()
        )));
    }
    let depths = tree.depths();
    let (tn, dn) = (forecast.horizon(), forecast.n_dims());
    let log2pi = (2.0 * std::f64::consts::PI).ln();
    let mut out = Vec::new();
    for level in 0..tree.n_levels() {
        let nodes: Vec<usize> = (0..n).filter(|&i| depths[i] == level).collect();
        let (mut se, mut nll) = (0.0, 0.0);
        for &i in &nodes {
            for t in 0..tn {
                for d in 0..dn {
                    let r = y_all.at(&[i, t, d]) - forecast.mean.at(&[i, t, d]);
                    let var = forecast.covariance.at(&[i, i, t, d]);
                    if !(var > 0.0) {
                        return Err(Error::NotPositiveDefinite { t, d });
                    }
                    se += r * r;
                    nll += 0.5 * (log2pi + var.ln() + r * r / var);
                }
            }
        }
        out.push(LevelMetrics {
            level,
            n_nodes: nodes.len(),
            rmse: (se / (nodes.len() * tn * dn) as f64).sqrt(),
            nll: nll / nodes.len() as f64,
        });
    }
    Ok(out)
}

/// Metrics of `forecast` (original units) against `y`.
pub fn scene_metrics(id: &str, y: &Tensor<f64>, forecast: &GaussianForecast) -> Result<SceneMetrics> {
    let (nll, flag) = match nll_metric(y, forecast) {
        Ok(v) if v.is_finite() => (Some(v), None),
        Ok(v) => (None, Some(format!("non-finite nll {v}"))),
        Err(e) if e.is_numeric() => (None, Some(e.to_string())),
        Err(e) => return Err(e),
    };
    Ok(SceneMetrics {
        id: id.into(),
        n_series: y.shape()[0],
        ade: ade(&forecast.mean, y)?,
        fde: fde(&forecast.mean, y)?,
        nll,
        flag,
    })
}

/// Runs the model on one raw scene: standardize, predict, map back.
pub fn forecast_scene<F: Real>(model: &HiPerformer<F>, st: &Standardizer, scene: &SceneRecord) -> Result<GaussianForecast> {
    let s = st.apply(scene);
    let x: Tensor<F> = s.x.cast();
    match &scene.tree {
        None => st.inverse_forecast(&model.predict(&x, &s.labels)?),
        Some(tree) => {
            let counts: Vec<usize> = tree.aggregation_groups().iter().map(Vec::len).collect();
            st.inverse_forecast_counts(&model.predict_hier(&x, &s.labels, tree)?, &counts)
        }
    }
}

/// Evaluates every scene. Scenes with a hierarchy are scored on all tree
/// nodes and also get per-level tables (averaged over scenes).
pub fn evaluate<F: Real>(
    model: &HiPerformer<F>,
    st: &Standardizer,
    scenes: &[SceneRecord],
    config: serde_json::Value,
) -> Result<MetricReport> {
    let mut rows = Vec::with_capacity(scenes.len());
    let mut level_sum: Vec<LevelMetrics> = Vec::new();
    let mut n_hier = 0;
    for scene in scenes {
        let f = forecast_scene(model, st, scene)?;
        let y = match &scene.tree {
            None => scene.y.clone(),
            Some(tree) => tree.aggregate_tensor(&scene.y)?,
        };
        rows.push(scene_metrics(&scene.id, &y, &f)?);
        if let Some(tree) = &scene.tree {
            let levels = per_level_metrics(&y, &f, tree)?;
            if level_sum.is_empty() {
                level_sum = levels;
            } else {
                for (acc, l) in level_sum.iter_mut().zip(levels) {
                    acc.rmse += l.rmse;
                    acc.nll += l.nll;
                }
            }
            n_hier += 1;
        }
    }
    for l in &mut level_sum {
        l.rmse /= n_hier as f64;
        l.nll /= n_hier as f64;
    }
    Ok(MetricReport::from_scenes(rows, level_sum, config))
}

/// How many series to drop from each class, keyed by class label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Removal {
    pub counts: Vec<(String, usize)>,
}

impl Removal {
    pub fn total(&self) -> usize {
        self.counts.iter().map(|(_, k)| k).sum()
    }
}

/// Every pair `(k_a, k_b)` with `k_a ≤ max_a`, `k_b ≤ max_b`.
pub fn removal_grid(class_a: &str, max_a: usize, class_b: &str, max_b: usize) -> Vec<Removal> {
    let mut out = Vec::new();
    for a in 0..=max_a {
        for b in 0..=max_b {
            out.push(Removal {
                counts: vec![(class_a.to_string(), a), (class_b.to_string(), b)],
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovalCell {
    pub removal: Removal,
    pub report: MetricReport,
    /// Full-scene forecasts scored on the same kept series.
    pub reference: MetricReport,
    /// Series indices dropped from each scene, in scene order.
    pub removed: Vec<Vec<usize>>,
}

impl RemovalCell {
    /// ADE lost by removing series, against the reference on the kept series.
    pub fn ade_increase(&self) -> f64 {
        self.report.aggregate.ade - self.reference.aggregate.ade
    }
}

/// Which series of `labels` to drop; each class keeps at least one series.
pub fn choose_removed(labels: &ClassAssignment, removal: &Removal, seed: u64) -> Result<Vec<usize>> {
    let mut rng = seeded(seed);
    let mut removed = Vec::new();
    for (class, k) in &removal.counts {
        let mut members: Vec<usize> = labels.labels().iter().enumerate().filter(|(_, l)| *l == class).map(|(i, _)| i).collect();
        if *k > 0 && *k >= members.len() {
            return Err(Error::Protocol(format!(
                "removing {k} of {} series would empty class {class:?}",
                members.len()
            )));
        }
        shuffle(&mut members, &mut rng);
        removed.extend_from_slice(&members[..*k]);
    }
    removed.sort_unstable();
    Ok(removed)
}

/// For each removal, drops the chosen series from every scene and
/// evaluates the unchanged model on what remains. Each cell also scores the
/// full-scene forecast on the kept series, so selection effects cancel.
pub fn remove_series_protocol<F: Real>(
    model: &HiPerformer<F>,
    st: &Standardizer,
    scenes: &[SceneRecord],
    removals: &[Removal],
    seed: u64,
) -> Result<Vec<RemovalCell>> {
    let full: Vec<GaussianForecast> = scenes.iter().map(|s| forecast_scene(model, st, s)).collect::<Result<_>>()?;
    let mut cells = Vec::with_capacity(removals.len());
    for removal in removals {
        let mut reduced = Vec::with_capacity(scenes.len());
        let mut reference = Vec::with_capacity(scenes.len());
        let mut removed_all = Vec::with_capacity(scenes.len());
        for (k, (scene, f)) in scenes.iter().zip(&full).enumerate() {
            let removed = choose_removed(&scene.labels, removal, derive_seed(seed, k as u64))?;
            let keep: Vec<usize> = (0..scene.n_series()).filter(|i| !removed.contains(i)).collect();
            let sub = scene.subset(&keep)?;
            reference.push(scene_metrics(&scene.id, &sub.y, &f.select_series(&keep)?)?);
            reduced.push(sub);
            removed_all.push(removed);
        }
        let config = serde_json::to_value(removal).unwrap_or_default();
        cells.push(RemovalCell {
            removal: removal.clone(),
            report: evaluate(model, st, &reduced, config.clone())?,
            reference: MetricReport::from_scenes(reference, Vec::new(), config),
            removed: removed_all,
        });
    }
    Ok(cells)
}
