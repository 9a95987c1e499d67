//! Permutations of series, the hierarchical subset of them, and an
//! equivariance checker that runs a model on original and permuted inputs.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dist::GaussianForecast;
use crate::model::{ClassAssignment, HiPerformer};
use crate::numerics::rng::{seeded, shuffle};
use crate::numerics::{Real, Tensor};
use crate::{Error, Result};

/// Default tolerances per precision.
pub const TOL_F64: f64 = 1e-9;
pub const TOL_F32: f64 = 1e-4;

/// A reordering of `S` series: position `i` of the permuted set holds
/// series `map[i]` of the original.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SeriesPermutation {
    map: Vec<usize>,
}

impl SeriesPermutation {
    pub fn new(map: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; map.len()];
        for &i in &map {
            if i >= map.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Contract(format!("{map:?} is not a permutation")));
            }
        }
        Ok(SeriesPermutation { map })
    }

    pub fn identity(n: usize) -> Self {
        SeriesPermutation { map: (0..n).collect() }
    }

    pub fn random(n: usize, rng: &mut impl Rng) -> Self {
        let mut map: Vec<usize> = (0..n).collect();
        shuffle(&mut map, rng);
        SeriesPermutation { map }
    }

    pub fn map(&self) -> &[usize] {
        &self.map
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.map.iter().enumerate().all(|(i, &m)| i == m)
    }

    /// Applying `self` and then `next`.
    pub fn then(&self, next: &SeriesPermutation) -> Result<Self> {
        if next.len() != self.len() {
            return Err(Error::shape("compose", format!("{} vs {}", self.len(), next.len())));
        }
        Ok(SeriesPermutation {
            map: next.map.iter().map(|&j| self.map[j]).collect(),
        })
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.len()];
        for (i, &m) in self.map.iter().enumerate() {
            inv[m] = i;
        }
        SeriesPermutation { map: inv }
    }

    /// Reorders the leading axis of `x`.
    pub fn apply<F: Real>(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        if x.shape().first() != Some(&self.len()) {
            return Err(Error::shape("permute series", format!("{:?} for {} series", x.shape(), self.len())));
        }
        x.select_rows(&self.map)
    }

    pub fn apply_labels(&self, c: &ClassAssignment) -> Result<ClassAssignment> {
        c.reordered(&self.map)
    }
}

fn class_contiguous(labels: &[&str]) -> bool {
    let mut done: Vec<&str> = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        if i > 0 && labels[i - 1] == *l {
            continue;
        }
        if done.contains(l) {
            return false;
        }
        done.push(l);
    }
    true
}

/// Whether `p` only shuffles series within classes and moves whole classes.
///
/// Two readings are accepted. Positionally, `p` must carry each class's
/// position set onto the position set of one class (so the sizes agree).
/// When the classes occupy contiguous blocks, `p` may also reorder those
/// blocks regardless of their sizes, provided the result is again
/// block-contiguous.
pub fn is_hierarchical_permutation(p: &SeriesPermutation, c: &ClassAssignment) -> bool {
    if p.len() != c.len() {
        return false;
    }
    let labels: Vec<&str> = c.labels().iter().map(String::as_str).collect();
    // positional: series that share a class land on positions that share a class
    let layout = c.layout();
    let inv = p.inverse();
    let positional = layout.members().iter().all(|members| {
        let dest: Vec<&str> = members.iter().map(|&i| labels[inv.map[i]]).collect();
        let target = dest[0];
        dest.iter().all(|&l| l == target)
            && labels.iter().filter(|&&l| l == target).count() == members.len()
    });
    if positional {
        return true;
    }
    let moved: Vec<&str> = p.map.iter().map(|&i| labels[i]).collect();
    class_contiguous(&labels) && class_contiguous(&moved)
}

/// Uniform within-class shuffles composed with a uniform reassignment of
/// classes among the positions of classes of equal size.
pub fn random_hierarchical_permutation(c: &ClassAssignment, seed: u64) -> SeriesPermutation {
    let mut rng = seeded(seed);
    random_hierarchical_permutation_with(c, &mut rng)
}

pub fn random_hierarchical_permutation_with(c: &ClassAssignment, rng: &mut impl Rng) -> SeriesPermutation {
    let layout = c.layout();
    let members = layout.members();
    let mut map = vec![0; c.len()];
    let mut sizes: Vec<usize> = members.iter().map(Vec::len).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let mut target_of = vec![0; members.len()];
    for size in sizes {
        let group: Vec<usize> = (0..members.len()).filter(|&k| members[k].len() == size).collect();
        let mut shuffled = group.clone();
        shuffle(&mut shuffled, rng);
        for (&k, &t) in group.iter().zip(&shuffled) {
            target_of[k] = t;
        }
    }
    for (k, m) in members.iter().enumerate() {
        let mut src = m.clone();
        shuffle(&mut src, rng);
        for (&pos, &s) in members[target_of[k]].iter().zip(&src) {
            map[pos] = s;
        }
    }
    SeriesPermutation { map }
}

/// How labels accompany a permutation of the inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    /// Labels move with their series: compare `f(πX, πc)` with `π f(X, c)`.
    Travel,
    /// Labels stay attached to positions: compare `f(πX, c)` with
    /// `π f(X, c)`.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Offending {
    pub quantity: String,
    pub series: usize,
    pub time: usize,
    pub channel: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivarianceVerdict {
    pub deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub offending: Option<Offending>,
    pub permutation: Vec<usize>,
    pub hierarchical: bool,
    pub mode: LabelMode,
}

impl EquivarianceVerdict {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("verdict serializes")
    }
}

pub fn write_verdicts(verdicts: &[EquivarianceVerdict], mut w: impl Write) -> Result<()> {
    for v in verdicts {
        writeln!(w, "{}", v.to_json_line()).map_err(|e| Error::io("<verdicts>", e))?;
    }
    Ok(())
}

struct Worst {
    dev: f64,
    at: Option<Offending>,
}

impl Worst {
    fn see(&mut self, dev: f64, quantity: &str, series: usize, time: usize, channel: usize) {
        let dev = if dev.is_nan() { f64::INFINITY } else { dev };
        if dev > self.dev || self.at.is_none() {
            self.dev = self.dev.max(dev);
            self.at = Some(Offending {
                quantity: quantity.into(),
                series,
                time,
                channel,
            });
        }
    }

    /// Compares `[S, T, K]` tensors.
    fn rows(&mut self, quantity: &str, a: &Tensor<f64>, b: &Tensor<f64>) {
        let s = a.shape();
        for i in 0..s[0] {
            for t in 0..s[1] {
                for k in 0..s[2] {
                    self.see((a.at(&[i, t, k]) - b.at(&[i, t, k])).abs(), quantity, i, t, k);
                }
            }
        }
    }
}

/// Runs `model` on `(X, c)` and on the permuted input, and measures how far
/// the permuted-input outputs are from the permuted outputs: features,
/// means, and covariance slices (`Σ -> P Σ Pᵀ`).
pub fn check_equivariance<F: Real>(
    model: &HiPerformer<F>,
    x: &Tensor<F>,
    c: &ClassAssignment,
    p: &SeriesPermutation,
    tol: f64,
    mode: LabelMode,
) -> Result<EquivarianceVerdict> {
    if p.len() != c.len() {
        return Err(Error::shape("check_equivariance", format!("{} series, permutation of {}", c.len(), p.len())));
    }
    let px = p.apply(x)?;
    let pc = match mode {
        LabelMode::Travel => p.apply_labels(c)?,
        LabelMode::Fixed => c.clone(),
    };
    let z = model.features(x, c)?.to_f64();
    let pz = model.features(&px, &pc)?.to_f64();
    let f = model.predict(x, c)?;
    let pf = model.predict(&px, &pc)?;
    Ok(compare(p, c, tol, mode, &z, &pz, &f, &pf))
}

#[allow(clippy::too_many_arguments)]
fn compare(
    p: &SeriesPermutation,
    c: &ClassAssignment,
    tol: f64,
    mode: LabelMode,
    z: &Tensor<f64>,
    pz: &Tensor<f64>,
    f: &GaussianForecast,
    pf: &GaussianForecast,
) -> EquivarianceVerdict {
    let mut worst = Worst { dev: 0.0, at: None };
    let want_z = p.apply(z).expect("shape checked");
    worst.rows("features", pz, &want_z);
    let want = f.permuted(p.map()).expect("shape checked");
    worst.rows("mean", &pf.mean, &want.mean);
    let s = f.n_series();
    for t in 0..f.horizon() {
        for d in 0..f.n_dims() {
            for i in 0..s {
                for j in 0..s {
                    let dev = (pf.covariance.at(&[i, j, t, d]) - want.covariance.at(&[i, j, t, d])).abs();
                    worst.see(dev, "covariance", i, t, d);
                }
            }
        }
    }
    let pass = worst.dev <= tol;
    EquivarianceVerdict {
        deviation: worst.dev,
        tolerance: tol,
        pass,
        offending: if pass { None } else { worst.at },
        permutation: p.map().to_vec(),
        hierarchical: is_hierarchical_permutation(p, c),
        mode,
    }
}
