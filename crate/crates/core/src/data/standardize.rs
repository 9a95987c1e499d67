use serde::{Deserialize, Serialize};

use super::SceneRecord;
use crate::dist::GaussianForecast;
use crate::numerics::Tensor;
use crate::{Error, Result};

/// Per-feature affine standardization, fit on training scenes.
/// Features with zero variance keep shift 0 and scale 1 and are flagged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub x_mean: Vec<f64>,
    pub x_scale: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_scale: Vec<f64>,
    pub x_constant: Vec<bool>,
    pub y_constant: Vec<bool>,
}

fn moments<'a>(tensors: impl Iterator<Item = &'a Tensor<f64>> + Clone, d: usize) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let mut count = 0usize;
    let mut sum = vec![0.0; d];
    for t in tensors.clone() {
        for row in t.data().chunks_exact(d) {
            count += 1;
            for (s, v) in sum.iter_mut().zip(row) {
                *s += v;
            }
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut ss = vec![0.0; d];
    for t in tensors {
        for row in t.data().chunks_exact(d) {
            for k in 0..d {
                ss[k] += (row[k] - mean[k]) * (row[k] - mean[k]);
            }
        }
    }
    let mut shift = mean.clone();
    let mut scale = vec![1.0; d];
    let mut constant = vec![false; d];
    for k in 0..d {
        let sd = (ss[k] / count as f64).sqrt();
        if sd <= 1e-12 * mean[k].abs().max(1.0) {
            constant[k] = true;
            shift[k] = 0.0;
        } else {
            scale[k] = sd;
        }
    }
    (shift, scale, constant)
}

fn affine(t: &Tensor<f64>, shift: &[f64], scale: &[f64], forward: bool) -> Tensor<f64> {
    let d = shift.len();
    let data = t
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let k = i % d;
            if forward {
                (v - shift[k]) / scale[k]
            } else {
                v * scale[k] + shift[k]
            }
        })
        .collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

impl Standardizer {
    pub fn fit(train: &[SceneRecord]) -> Result<Self> {
        let first = train.first().ok_or(Error::EmptyInput("standardize: empty training split"))?;
        let (dx, dy) = (first.x.shape()[2], first.y.shape()[2]);
        if train.iter().any(|r| r.x.shape()[2] != dx || r.y.shape()[2] != dy) {
            return Err(Error::shape("standardize", "scenes disagree on feature width"));
        }
        let (x_mean, x_scale, x_constant) = moments(train.iter().map(|r| &r.x), dx);
        let (y_mean, y_scale, y_constant) = moments(train.iter().map(|r| &r.y), dy);
        Ok(Standardizer {
            x_mean,
            x_scale,
            y_mean,
            y_scale,
            x_constant,
            y_constant,
        })
    }

    pub fn identity(dx: usize, dy: usize) -> Self {
        Standardizer {
            x_mean: vec![0.0; dx],
            x_scale: vec![1.0; dx],
            y_mean: vec![0.0; dy],
            y_scale: vec![1.0; dy],
            x_constant: vec![false; dx],
            y_constant: vec![false; dy],
        }
    }

    pub fn has_constant_features(&self) -> bool {
        self.x_constant.iter().chain(&self.y_constant).any(|&c| c)
    }

    pub fn apply(&self, r: &SceneRecord) -> SceneRecord {
        SceneRecord {
            x: affine(&r.x, &self.x_mean, &self.x_scale, true),
            y: affine(&r.y, &self.y_mean, &self.y_scale, true),
            ..r.clone()
        }
    }

    pub fn apply_all(&self, rs: &[SceneRecord]) -> Vec<SceneRecord> {
        rs.iter().map(|r| self.apply(r)).collect()
    }

    pub fn inverse_x(&self, x: &Tensor<f64>) -> Tensor<f64> {
        affine(x, &self.x_mean, &self.x_scale, false)
    }

    pub fn inverse_y(&self, y: &Tensor<f64>) -> Tensor<f64> {
        affine(y, &self.y_mean, &self.y_scale, false)
    }

    /// Forecast in original units. The shift applies to every series, so
    /// aggregate nodes of a hierarchy need [`Standardizer::inverse_forecast_counts`].
    pub fn inverse_forecast(&self, f: &GaussianForecast) -> Result<GaussianForecast> {
        self.inverse_forecast_counts(f, &vec![1; f.n_series()])
    }

    /// As [`Standardizer::inverse_forecast`], where series `i` is a sum of
    /// `counts[i]` standardized series (its shift is `counts[i]` times the
    /// per-series shift).
    pub fn inverse_forecast_counts(&self, f: &GaussianForecast, counts: &[usize]) -> Result<GaussianForecast> {
        let d = self.y_mean.len();
        if f.n_dims() != d || counts.len() != f.n_series() {
            return Err(Error::shape("inverse_forecast", format!("{} dims, {} counts", f.n_dims(), counts.len())));
        }
        let mut mean = f.mean.clone();
        let s = mean.shape().to_vec();
        for i in 0..s[0] {
            for t in 0..s[1] {
                for k in 0..d {
                    let v = mean.at(&[i, t, k]) * self.y_scale[k] + self.y_mean[k] * counts[i] as f64;
                    mean.set(&[i, t, k], v);
                }
            }
        }
        let cov = Tensor::from_fn(f.covariance.shape(), |idx| {
            f.covariance.data()[idx] * self.y_scale[idx % d] * self.y_scale[idx % d]
        });
        GaussianForecast::new(mean, cov)
    }
}
