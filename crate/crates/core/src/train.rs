//! Minibatch Adam training with best-validation model selection.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SceneRecord, Standardizer};
use crate::dist::{gaussian_nll, mae};
use crate::eval::ade;
use crate::model::{save_checkpoint, HiPerformer, ModelConfig};
use crate::numerics::rng::{derive_seed, seeded, shuffle};
use crate::numerics::{Adam, AdamConfig, Precision, Real, Tape, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    /// Gaussian negative log-likelihood.
    #[default]
    Nll,
    /// Mean absolute error of the mean forecast.
    Mae,
}

impl fmt::Display for Loss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Loss::Nll => "nll",
            Loss::Mae => "mae",
        })
    }
}

impl FromStr for Loss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nll" => Ok(Loss::Nll),
            "mae" => Ok(Loss::Mae),
            other => Err(Error::Config(format!("unknown loss {other:?}"))),
        }
    }
}

fn default_epochs() -> usize {
    30
}
fn default_batch() -> usize {
    8
}
fn default_lr() -> f64 {
    1e-3
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub loss: Loss,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub seed: u64,
    /// Global gradient-norm clip; none when absent.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr: default_lr(),
            loss: Loss::Nll,
            precision: Precision::F64,
            seed: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Validation ADE in original units.
    pub val_ade: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<F: Real> {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: HiPerformer<F>,
    pub standardizer: Standardizer,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

/// Per-scene objective on standardized data: NLL per entry of `y` or MAE.
pub fn scene_loss<F: Real>(model: &HiPerformer<F>, tape: &mut Tape<'_, F>, scene: &SceneRecord, loss: Loss) -> Result<(crate::numerics::Var, crate::numerics::Var)> {
    let x: Tensor<F> = scene.x.cast();
    let y: Tensor<F> = scene.y.cast();
    match loss {
        Loss::Nll => {
            let v = model.forward(tape, &x, &scene.labels)?;
            let nll = gaussian_nll(tape, &y, v.mean, &v.covariance.sigma)?;
            Ok((tape.scale(nll, 1.0 / y.len() as f64), v.mean))
        }
        Loss::Mae => {
            let z = model.features_var(tape, &x, &scene.labels)?;
            let mean = model.head.mean.forward(tape, z)?;
            Ok((mae(tape, &y, mean)?, mean))
        }
    }
}

fn evaluate_split<F: Real>(model: &HiPerformer<F>, st: &Standardizer, scenes: &[SceneRecord], loss: Loss) -> Result<(f64, f64)> {
    let (mut l, mut a) = (0.0, 0.0);
    for s in scenes {
        let mut tape = Tape::new(&model.store);
        let (lv, mean) = scene_loss(model, &mut tape, s, loss)?;
        l += tape.value(lv).item().f64();
        let pred = st.inverse_y(&tape.value(mean).to_f64());
        a += ade(&pred, &st.inverse_y(&s.y))?;
    }
    let n = scenes.len().max(1) as f64;
    Ok((l / n, a / n))
}

fn clip(model: &mut HiPerformer<impl Real>, max_norm: f64) {
    let sq: f64 = model.store.iter().flat_map(|p| p.grad.data().iter()).map(|g| g.f64() * g.f64()).sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for p in model.store.iter_mut() {
            for g in p.grad.data_mut() {
                *g = *g * <_ as Real>::c(k);
            }
        }
    }
}

/// Trains a fresh model. Scenes are standardized with statistics from the
/// training split. `log` receives one NDJSON line per epoch.
pub fn train<F: Real>(
    model_cfg: ModelConfig,
    tc: &TrainConfig,
    ds: &Dataset,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome<F>> {
    tc.validate()?;
    if ds.train.is_empty() || ds.val.is_empty() {
        return Err(Error::EmptyInput("training needs nonempty train and val splits"));
    }
    let st = Standardizer::fit(&ds.train)?;
    if st.has_constant_features() {
        log::warn!("constant features left unscaled");
    }
    let train_set = st.apply_all(&ds.train);
    let val_set = st.apply_all(&ds.val);
    let mut model = HiPerformer::<F>::new(model_cfg, tc.seed)?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: tc.lr,
            ..AdamConfig::default()
        },
        &model.store,
    );
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, HiPerformer<F>)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=tc.epochs {
        shuffle(&mut order, &mut seeded(derive_seed(tc.seed, epoch as u64)));
        let mut total = 0.0;
        for (batch, idx) in order.chunks(tc.batch_size).enumerate() {
            let ctx = |e: Error| Error::Training {
                epoch,
                batch,
                source: Box::new(e),
            };
            model.store.zero_grad();
            for &i in idx {
                let (value, grads) = {
                    let mut tape = Tape::new(&model.store);
                    let (loss, _) = scene_loss(&model, &mut tape, &train_set[i], tc.loss).map_err(ctx)?;
                    let value = tape.value(loss).item().f64();
                    if !value.is_finite() {
                        return Err(ctx(Error::NonFinite(format!("loss {value} on scene {}", train_set[i].id))));
                    }
                    (value, tape.backward(loss).map_err(ctx)?)
                };
                if !grads.all_finite() {
                    return Err(ctx(Error::NonFinite(format!("gradient on scene {}", train_set[i].id))));
                }
                total += value;
                model.store.accumulate(&grads, F::c(1.0 / idx.len() as f64)).map_err(ctx)?;
            }
            if let Some(c) = tc.grad_clip {
                clip(&mut model, c);
            }
            adam.step(&mut model.store);
        }
        let (val_loss, val_ade) = evaluate_split(&model, &st, &val_set, tc.loss).map_err(|e| Error::Training {
            epoch,
            batch: 0,
            source: Box::new(e),
        })?;
        let entry = EpochLog {
            epoch,
            train_loss: total / train_set.len() as f64,
            val_loss,
            val_ade,
        };
        log::info!("epoch {epoch}: train {:.6} val {:.6} ade {:.6}", entry.train_loss, val_loss, val_ade);
        if let Some(w) = log.as_deref_mut() {
            let line = serde_json::to_string(&entry).expect("log entry serializes");
            writeln!(w, "{line}").map_err(|e| Error::io("<training log>", e))?;
        }
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, model.clone()));
        }
        history.push(entry);
    }
    let (best_epoch, model) = match best {
        Some((_, e, m)) => (e, m),
        None => (0, model),
    };
    Ok(TrainOutcome {
        model,
        standardizer: st,
        log: history,
        best_epoch,
    })
}

/// Trains and writes `train_log.ndjson` and `checkpoint/` under `out`.
pub fn train_to_dir<F: Real>(
    model_cfg: ModelConfig,
    tc: &TrainConfig,
    ds: &Dataset,
    out: &Path,
    mut meta: BTreeMap<String, serde_json::Value>,
) -> Result<TrainOutcome<F>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join("train_log.ndjson");
    let mut log_file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let outcome = train::<F>(model_cfg, tc, ds, Some(&mut log_file))?;
    meta.insert("best_epoch".into(), outcome.best_epoch.into());
    meta.insert("train".into(), serde_json::to_value(tc).expect("serializes"));
    meta.insert("standardizer".into(), serde_json::to_value(&outcome.standardizer).expect("serializes"));
    save_checkpoint(&outcome.model, &out.join("checkpoint"), meta)?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_names() {
        assert_eq!("NLL".parse::<Loss>().unwrap(), Loss::Nll);
        assert_eq!(Loss::Mae.to_string(), "mae");
        assert!("l2".parse::<Loss>().is_err());
    }

    #[test]
    fn config_rejects_zero_batch() {
        let tc = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(tc.validate().is_err());
    }
}
