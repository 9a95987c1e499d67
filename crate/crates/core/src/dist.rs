//! Gaussian forecast head: a linear mean and a kernel-Gram covariance per
//! output dimension, plus the negative log-likelihood objective.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::layers::Linear;
use crate::numerics::rng::{seeded, standard_normal};
use crate::numerics::{linalg, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::{Error, Result};

/// Relative diagonal jitter (times the mean diagonal of each slice).
pub const JITTER_REL: f64 = 1e-6;
/// Lower bound on the diagonal jitter.
pub const JITTER_FLOOR: f64 = 1e-8;

/// `exp(-γ ‖x − y‖²)`, always in `(0, 1]`.
pub fn rbf_kernel(x: &[f64], y: &[f64], gamma: f64) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("rbf_kernel", format!("{} vs {}", x.len(), y.len())));
    }
    if !(gamma > 0.0) {
        return Err(Error::Contract(format!("rbf bandwidth must be positive, got {gamma}")));
    }
    let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((-gamma * d2).exp())
}

/// `xᵀ y`.
pub fn linear_kernel(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("linear_kernel", format!("{} vs {}", x.len(), y.len())));
    }
    Ok(x.iter().zip(y).map(|(a, b)| a * b).sum())
}

#[derive(Debug, Clone, Copy)]
pub struct MeanHead {
    pub linear: Linear,
}

impl MeanHead {
    pub fn new<F: Real>(store: &mut ParamStore<F>, d_model: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        MeanHead {
            linear: Linear::new(store, "mean", d_model, d_out, rng),
        }
    }

    /// `[S, T, d_model] -> [S, T, D_out]`.
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, z: Var) -> Result<Var> {
        self.linear.forward(tape, z)
    }
}

/// Feature maps of the three kernels for every output dimension, and the
/// shared RBF bandwidth `γ = exp(g)`.
#[derive(Debug, Clone)]
pub struct KernelHeads {
    pub rbf: Vec<Linear>,
    pub lin: Vec<Linear>,
    pub scale: Vec<Linear>,
    pub log_gamma: ParamId,
}

/// Covariance slices on a tape, one `[T, S, S]` variable per output
/// dimension.
#[derive(Debug, Clone)]
pub struct CovarianceVars {
    pub pre_jitter: Vec<Var>,
    pub sigma: Vec<Var>,
    /// `jitter[d][t]` added to the diagonal of slice `(t, d)`.
    pub jitter: Vec<Vec<f64>>,
}

impl KernelHeads {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        d_model: usize,
        d_out: usize,
        kernel_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut make = |kind: &str| -> Vec<Linear> {
            (0..d_out)
                .map(|d| Linear::new(store, &format!("cov{d}.{kind}"), d_model, kernel_dim, rng))
                .collect()
        };
        let rbf = make("rbf");
        let lin = make("lin");
        let scale = make("scale");
        KernelHeads {
            rbf,
            lin,
            scale,
            log_gamma: store.add_zeros("cov.log_gamma", &[1]),
        }
    }

    pub fn gamma<F: Real>(&self, store: &ParamStore<F>) -> f64 {
        store.value(self.log_gamma).item().f64().exp()
    }

    /// `Σ = (K_rbf + K_lin) ⊙ K_scale + λ I` per `(t, d)`, from
    /// `z: [S, T, d_model]`.
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, z: Var) -> Result<CovarianceVars> {
        if !tape.value(z).is_finite() {
            return Err(Error::NonFinite("features entering the covariance head".into()));
        }
        let s = tape.shape(z).to_vec();
        if s.len() != 3 || s[0] == 0 {
            return Err(Error::shape("covariance_head", format!("expected [S, T, d], got {s:?}")));
        }
        let (n, t) = (s[0], s[1]);
        let zt = tape.permute(z, &[1, 0, 2])?; // [T, S, d]
        let g = tape.param(self.log_gamma);
        let gamma = tape.exp(g);
        let mut out = CovarianceVars {
            pre_jitter: Vec::new(),
            sigma: Vec::new(),
            jitter: Vec::new(),
        };
        for d in 0..self.rbf.len() {
            let fr = self.rbf[d].forward(tape, zt)?;
            let dist = tape.pairwise_sq_dist(fr)?;
            let neg = tape.scale(dist, -1.0);
            let arg = tape.mul_scalar(neg, gamma)?;
            let k_rbf = tape.exp(arg);
            let fl = self.lin[d].forward(tape, zt)?;
            let k_lin = tape.bmm(fl, fl, true)?;
            let fs = self.scale[d].forward(tape, zt)?;
            let k_scale = tape.bmm(fs, fs, true)?;
            let k = tape.add(k_rbf, k_lin)?;
            let pre = tape.mul(k, k_scale)?;

            // λ_t = JITTER_REL · mean diag, or the floor where that is smaller;
            // built on the tape so gradients see it.
            let value = tape.value(pre);
            let mut lambdas = Vec::with_capacity(t);
            let mut coef = Vec::with_capacity(t);
            let mut offset = Vec::with_capacity(t);
            for ti in 0..t {
                let mean_diag = (0..n).map(|i| value.at(&[ti, i, i]).f64()).sum::<f64>() / n as f64;
                if !mean_diag.is_finite() {
                    return Err(Error::NonFinite(format!("covariance diagonal at t={ti}, d={d}")));
                }
                let rel = JITTER_REL * mean_diag;
                if rel >= JITTER_FLOOR {
                    coef.push(F::c(JITTER_REL / n as f64));
                    offset.push(F::zero());
                    lambdas.push(rel);
                } else {
                    coef.push(F::zero());
                    offset.push(F::c(JITTER_FLOOR));
                    lambdas.push(JITTER_FLOOR);
                }
            }
            let eye_flat = Tensor::<F>::eye(n).reshape(&[1, n * n])?;
            let eyes = tape.constant(Tensor::from_fn(&[t, n, n], |i| eye_flat.data()[i % (n * n)]));
            let diag = tape.mul(pre, eyes)?;
            let diag = tape.reshape(diag, &[t, n * n])?;
            let ones = tape.constant(Tensor::full(&[n * n, 1], F::one()));
            let trace = tape.matmul(diag, ones)?;
            let coef = tape.constant(Tensor::new(vec![t, 1], coef)?);
            let scaled = tape.mul(trace, coef)?;
            let offset = tape.constant(Tensor::new(vec![t, 1], offset)?);
            let lambda = tape.add(scaled, offset)?;
            let eye_row = tape.constant(eye_flat);
            let jitter = tape.matmul(lambda, eye_row)?;
            let jitter = tape.reshape(jitter, &[t, n, n])?;
            let sigma = tape.add(pre, jitter)?;
            out.pre_jitter.push(pre);
            out.sigma.push(sigma);
            out.jitter.push(lambdas);
        }
        Ok(out)
    }
}

/// Mean and covariance heads together.
#[derive(Debug, Clone)]
pub struct DistributionHead {
    pub mean: MeanHead,
    pub kernels: KernelHeads,
}

impl DistributionHead {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        d_model: usize,
        d_out: usize,
        kernel_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        DistributionHead {
            mean: MeanHead::new(store, d_model, d_out, rng),
            kernels: KernelHeads::new(store, d_model, d_out, kernel_dim, rng),
        }
    }
}

/// Column `d` of `[S, T, D]` as `[T, S]`.
fn channel<F: Real>(tape: &mut Tape<F>, x: Var, d: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let p = tape.permute(x, &[2, 1, 0])?;
    let c = tape.select_rows(p, &[d])?;
    tape.reshape(c, &[s[1], s[0]])
}

/// `Σ_t Σ_d −log N(Y[:, t, d] | μ[:, t, d], Σ_d[t])` on the tape.
pub fn gaussian_nll<F: Real>(tape: &mut Tape<F>, y: &Tensor<F>, mean: Var, sigma: &[Var]) -> Result<Var> {
    let ms = tape.shape(mean).to_vec();
    if y.shape() != ms.as_slice() || ms.len() != 3 || sigma.len() != ms[2] {
        return Err(Error::shape(
            "gaussian_nll",
            format!("targets {:?}, mean {ms:?}, {} covariance slices", y.shape(), sigma.len()),
        ));
    }
    let yv = tape.constant(y.clone());
    let mut total: Option<Var> = None;
    for (d, &sig) in sigma.iter().enumerate() {
        let yd = channel(tape, yv, d)?;
        let md = channel(tape, mean, d)?;
        let r = tape.sub(yd, md)?;
        let nll = tape.gaussian_nll(sig, r).map_err(|e| match e {
            Error::Cholesky { slice } => Error::NotPositiveDefinite { t: slice, d },
            other => other,
        })?;
        total = Some(match total {
            None => nll,
            Some(acc) => tape.add(acc, nll)?,
        });
    }
    total.ok_or_else(|| Error::shape("gaussian_nll", "no output dimensions"))
}

/// Mean absolute error between `mean` and `y`, as a tape scalar.
pub fn mae<F: Real>(tape: &mut Tape<F>, y: &Tensor<F>, mean: Var) -> Result<Var> {
    let yv = tape.constant(y.clone());
    let r = tape.sub(mean, yv)?;
    let a = tape.abs(r);
    Ok(tape.mean(a))
}

/// A multivariate Gaussian over series at every `(t, d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianForecast {
    /// `[S, T, D]`
    pub mean: Tensor<f64>,
    /// `[S, S, T, D]`
    pub covariance: Tensor<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRecord {
    pub series_ids: Vec<String>,
    pub t: usize,
    pub d: usize,
    pub mean: Vec<f64>,
    /// Row-major lower triangle, `S(S+1)/2` entries.
    pub cov_lower: Vec<f64>,
}

impl GaussianForecast {
    pub fn new(mean: Tensor<f64>, covariance: Tensor<f64>) -> Result<Self> {
        let m = mean.shape();
        let c = covariance.shape();
        if m.len() != 3 || c != [m[0], m[0], m[1], m[2]] {
            return Err(Error::shape("forecast", format!("mean {m:?} with covariance {c:?}")));
        }
        Ok(GaussianForecast { mean, covariance })
    }

    /// Collects the heads' tape outputs into a forecast.
    pub fn from_tape<F: Real>(tape: &Tape<F>, mean: Var, sigma: &[Var]) -> Result<Self> {
        let mean = tape.value(mean).to_f64();
        let (s, t, dn) = (mean.shape()[0], mean.shape()[1], mean.shape()[2]);
        let mut cov = Tensor::zeros(&[s, s, t, dn]);
        for (d, &v) in sigma.iter().enumerate() {
            let sv = tape.value(v);
            for ti in 0..t {
                for i in 0..s {
                    for j in 0..s {
                        cov.set(&[i, j, ti, d], sv.at(&[ti, i, j]).f64());
                    }
                }
            }
        }
        Self::new(mean, cov)
    }

    pub fn n_series(&self) -> usize {
        self.mean.shape()[0]
    }

    pub fn horizon(&self) -> usize {
        self.mean.shape()[1]
    }

    pub fn n_dims(&self) -> usize {
        self.mean.shape()[2]
    }

    pub fn mean_slice(&self, t: usize, d: usize) -> Vec<f64> {
        (0..self.n_series()).map(|i| self.mean.at(&[i, t, d])).collect()
    }

    /// Row-major `S × S` covariance at `(t, d)`.
    pub fn cov_slice(&self, t: usize, d: usize) -> Vec<f64> {
        let s = self.n_series();
        let mut out = Vec::with_capacity(s * s);
        for i in 0..s {
            for j in 0..s {
                out.push(self.covariance.at(&[i, j, t, d]));
            }
        }
        out
    }

    fn factor(&self, t: usize, d: usize) -> Result<Vec<f64>> {
        linalg::cholesky(&self.cov_slice(t, d), self.n_series()).ok_or(Error::NotPositiveDefinite { t, d })
    }

    /// Checks symmetry (to `1e-12` relative to the largest entry) and
    /// positive definiteness of every slice.
    pub fn validate(&self) -> Result<()> {
        let s = self.n_series();
        for t in 0..self.horizon() {
            for d in 0..self.n_dims() {
                let c = self.cov_slice(t, d);
                let scale = c.iter().fold(1.0f64, |m, v| m.max(v.abs()));
                for i in 0..s {
                    for j in 0..i {
                        if (c[i * s + j] - c[j * s + i]).abs() > 1e-12 * scale {
                            return Err(Error::Contract(format!("covariance asymmetric at t={t}, d={d}")));
                        }
                    }
                }
                self.factor(t, d)?;
            }
        }
        Ok(())
    }

    /// Negative log-likelihood of `y: [S, T, D]`, summed over `(t, d)`.
    pub fn nll(&self, y: &Tensor<f64>) -> Result<f64> {
        if y.shape() != self.mean.shape() {
            return Err(Error::shape("nll", format!("{:?} vs {:?}", y.shape(), self.mean.shape())));
        }
        let s = self.n_series();
        let log2pi = (2.0 * std::f64::consts::PI).ln();
        let mut total = 0.0;
        for t in 0..self.horizon() {
            for d in 0..self.n_dims() {
                let l = self.factor(t, d)?;
                let mut r: Vec<f64> = (0..s).map(|i| y.at(&[i, t, d]) - self.mean.at(&[i, t, d])).collect();
                linalg::solve_lower(&l, s, &mut r);
                let quad: f64 = r.iter().map(|v| v * v).sum();
                total += 0.5 * (s as f64 * log2pi + linalg::log_det_from_cholesky(&l, s) + quad);
            }
        }
        Ok(total)
    }

    /// `n` seeded draws `μ + L ξ`, shape `[n, S, T, D]`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Tensor<f64>> {
        let (s, tn, dn) = (self.n_series(), self.horizon(), self.n_dims());
        let factors = (0..tn)
            .flat_map(|t| (0..dn).map(move |d| (t, d)))
            .map(|(t, d)| self.factor(t, d))
            .collect::<Result<Vec<_>>>()?;
        let mut rng = seeded(seed);
        let mut out = Tensor::zeros(&[n, s, tn, dn]);
        let mut xi = vec![0.0; s];
        for k in 0..n {
            for t in 0..tn {
                for d in 0..dn {
                    let l = &factors[t * dn + d];
                    xi.iter_mut().for_each(|v| *v = standard_normal(&mut rng));
                    for i in 0..s {
                        let mut v = self.mean.at(&[i, t, d]);
                        for j in 0..=i {
                            v += l[i * s + j] * xi[j];
                        }
                        out.set(&[k, i, t, d], v);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Series reordered so that position `i` holds series `map[i]`: the mean
    /// rows are permuted and every covariance slice becomes `P Σ Pᵀ`.
    pub fn permuted(&self, map: &[usize]) -> Result<Self> {
        let s = self.n_series();
        if map.len() != s {
            return Err(Error::shape("permuted", format!("map of length {} for {s} series", map.len())));
        }
        self.select_series(map)
    }

    /// Marginal over the listed series, in the listed order.
    pub fn select_series(&self, keep: &[usize]) -> Result<Self> {
        let s = self.n_series();
        if keep.iter().any(|&i| i >= s) {
            return Err(Error::shape("select_series", format!("index out of range for {s} series")));
        }
        let mean = self.mean.select_rows(keep)?;
        let (k, tn, dn) = (keep.len(), self.horizon(), self.n_dims());
        let mut cov = Tensor::zeros(&[k, k, tn, dn]);
        for (i, &a) in keep.iter().enumerate() {
            for (j, &b) in keep.iter().enumerate() {
                for t in 0..tn {
                    for d in 0..dn {
                        cov.set(&[i, j, t, d], self.covariance.at(&[a, b, t, d]));
                    }
                }
            }
        }
        Self::new(mean, cov)
    }

    pub fn records(&self, series_ids: &[String]) -> Result<Vec<ForecastRecord>> {
        let s = self.n_series();
        if series_ids.len() != s {
            return Err(Error::shape("forecast records", format!("{} ids for {s} series", series_ids.len())));
        }
        let mut out = Vec::new();
        for t in 0..self.horizon() {
            for d in 0..self.n_dims() {
                let c = self.cov_slice(t, d);
                out.push(ForecastRecord {
                    series_ids: series_ids.to_vec(),
                    t,
                    d,
                    mean: self.mean_slice(t, d),
                    cov_lower: (0..s).flat_map(|i| (0..=i).map(move |j| (i, j))).map(|(i, j)| c[i * s + j]).collect(),
                });
            }
        }
        Ok(out)
    }

    /// One JSON object per `(t, d)` slice.
    pub fn write_ndjson(&self, series_ids: &[String], mut w: impl Write) -> Result<()> {
        for r in self.records(series_ids)? {
            let line = serde_json::to_string(&r).map_err(|e| Error::Format {
                what: "forecast record".into(),
                detail: e.to_string(),
            })?;
            writeln!(w, "{line}").map_err(|e| Error::io("<forecast dump>", e))?;
        }
        Ok(())
    }
}
