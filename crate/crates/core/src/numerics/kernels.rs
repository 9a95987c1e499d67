//! Slice-level kernels shared by [`Tensor`](super::Tensor) and the tape.
//!
//! All loops run in a fixed order (no atomics, no work stealing) so results
//! are reproducible bit for bit.

use std::cell::Cell;

use super::Real;

thread_local! {
    static DENSE_FLOPS: Cell<u64> = const { Cell::new(0) };
    static BATCHED_FLOPS: Cell<u64> = const { Cell::new(0) };
}

/// Snapshot of the per-thread floating-point operation counters.
///
/// `dense` counts products against a shared right operand (linear maps),
/// `batched` counts batched products, which in this crate are the
/// query-key scores and value mixing of attention plus Gram matrices.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopCount {
    pub dense: u64,
    pub batched: u64,
}

pub fn reset_flops() {
    DENSE_FLOPS.with(|c| c.set(0));
    BATCHED_FLOPS.with(|c| c.set(0));
}

pub fn flops() -> FlopCount {
    FlopCount {
        dense: DENSE_FLOPS.with(|c| c.get()),
        batched: BATCHED_FLOPS.with(|c| c.get()),
    }
}

pub(crate) fn count_dense(m: usize, k: usize, n: usize) {
    DENSE_FLOPS.with(|c| c.set(c.get() + 2 * (m * k * n) as u64));
}

pub(crate) fn count_batched(m: usize, k: usize, n: usize) {
    BATCHED_FLOPS.with(|c| c.set(c.get() + 2 * (m * k * n) as u64));
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn<F: Real>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt<F: Real>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn<F: Real>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &api) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += api * bv;
            }
        }
    }
}

/// Row-wise softmax over contiguous rows of length `width`, with
/// max-subtraction.
pub fn softmax_rows<F: Real>(x: &[F], width: usize, out: &mut [F]) {
    for (xr, or) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let max = xr.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for (o, &v) in or.iter_mut().zip(xr) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        let inv = F::one() / sum;
        for o in or.iter_mut() {
            *o *= inv;
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row normalization to zero mean and unit variance, followed by the
/// affine `gain`/`bias`. Writes the normalized (pre-affine) values to
/// `xhat` and the reciprocal standard deviation per row to `inv_std`.
pub fn layer_norm_rows<F: Real>(
    x: &[F],
    width: usize,
    gain: &[F],
    bias: &[F],
    out: &mut [F],
    xhat: &mut [F],
    inv_std: &mut [F],
) {
    let w = F::c(width as f64);
    let eps = F::c(LAYER_NORM_EPS);
    for (r, xr) in x.chunks_exact(width).enumerate() {
        let mean = xr.iter().copied().sum::<F>() / w;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / w;
        let is = F::one() / (var + eps).sqrt();
        inv_std[r] = is;
        let base = r * width;
        for j in 0..width {
            let h = (xr[j] - mean) * is;
            xhat[base + j] = h;
            out[base + j] = h * gain[j] + bias[j];
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of the Gaussian error linear unit.
#[inline]
pub fn gelu<F: Real>(x: F) -> F {
    let c = F::c(GELU_C);
    let a = F::c(GELU_A);
    let u = c * (x + a * x * x * x);
    F::c(0.5) * x * (F::one() + u.tanh())
}

#[inline]
pub fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::c(GELU_C);
    let a = F::c(GELU_A);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let du = c * (F::one() + F::c(3.0) * a * x * x);
    F::c(0.5) * (F::one() + th) + F::c(0.5) * x * (F::one() - th * th) * du
}
