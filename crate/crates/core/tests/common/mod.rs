//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use hiperformer::model::{ClassAssignment, HiPerformer, ModelConfig, Variant};
use hiperformer::numerics::rng::{seeded, standard_normal, SeededRng};
use hiperformer::numerics::Tensor;
use rand::Rng;

pub fn rng(seed: u64) -> SeededRng {
    seeded(seed)
}

pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| standard_normal(rng))
}

/// Eigenvalues of a symmetric `n × n` row-major matrix by cyclic Jacobi
/// rotations.
pub fn jacobi_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        let scale: f64 = m.iter().map(|v| v * v).sum::<f64>().max(1e-300);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..n).map(|i| m[i * n + i]).collect()
}

/// `(log |det A|, A⁻¹)` by Gauss-Jordan elimination with partial pivoting.
pub fn logdet_inverse(a: &[f64], n: usize) -> (f64, Vec<f64>) {
    let mut m = a.to_vec();
    let mut inv: Vec<f64> = (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect();
    let mut logdet = 0.0;
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))
            .unwrap();
        if piv != col {
            for k in 0..n {
                m.swap(piv * n + k, col * n + k);
                inv.swap(piv * n + k, col * n + k);
            }
        }
        let d = m[col * n + col];
        logdet += d.abs().ln();
        for k in 0..n {
            m[col * n + k] /= d;
            inv[col * n + k] /= d;
        }
        for r in 0..n {
            if r != col {
                let f = m[r * n + col];
                for k in 0..n {
                    m[r * n + k] -= f * m[col * n + k];
                    inv[r * n + k] -= f * inv[col * n + k];
                }
            }
        }
    }
    (logdet, inv)
}

/// `−log N(y | μ, Σ)` through an explicit determinant and inverse.
pub fn explicit_nll(y: &[f64], mu: &[f64], sigma: &[f64]) -> f64 {
    let n = y.len();
    let (logdet, inv) = logdet_inverse(sigma, n);
    let r: Vec<f64> = y.iter().zip(mu).map(|(a, b)| a - b).collect();
    let mut quad = 0.0;
    for i in 0..n {
        for j in 0..n {
            quad += r[i] * inv[i * n + j] * r[j];
        }
    }
    0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + quad)
}

/// A random symmetric positive definite `n × n` matrix `A Aᵀ + δ I`.
pub fn random_spd(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let a: Vec<f64> = (0..n * n).map(|_| standard_normal(rng)).collect();
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            s[i * n + j] = (0..n).map(|k| a[i * n + k] * a[j * n + k]).sum::<f64>() + if i == j { 0.1 } else { 0.0 };
        }
    }
    s
}

/// Labels with classes interleaved, e.g. `A B A C B A ...`.
pub fn interleaved_labels(sizes: &[usize], rng: &mut impl Rng) -> ClassAssignment {
    let mut labels: Vec<String> = sizes
        .iter()
        .enumerate()
        .flat_map(|(k, &n)| std::iter::repeat_n(format!("class{k}"), n))
        .collect();
    hiperformer::numerics::rng::shuffle(&mut labels, rng);
    ClassAssignment::new(labels).unwrap()
}

pub fn small_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        kernel_dim: 4,
        variant,
        ..ModelConfig::new(5, 3, 3, 2)
    }
}

pub fn small_model(variant: Variant, seed: u64) -> HiPerformer<f64> {
    HiPerformer::new(small_config(variant), seed).unwrap()
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Parameter group of a parameter name: everything before the last dot.
pub fn param_group(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(g, _)| g)
}
