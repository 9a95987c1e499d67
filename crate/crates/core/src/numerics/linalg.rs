//! Small dense factorizations on row-major `n×n` slices.

use super::Real;

/// Lower Cholesky factor of a symmetric positive-definite matrix, reading
/// only the lower triangle. `None` when a pivot is not strictly positive or
/// not finite.
pub fn cholesky<F: Real>(a: &[F], n: usize) -> Option<Vec<F>> {
    debug_assert_eq!(a.len(), n * n);
    let mut l = vec![F::zero(); n * n];
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > F::zero()) || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l[j * n + j] = djj;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / djj;
        }
    }
    Some(l)
}

/// Solves `L x = b` in place for lower-triangular `L`.
pub fn solve_lower<F: Real>(l: &[F], n: usize, b: &mut [F]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Solves `Lᵀ x = b` in place for lower-triangular `L`.
pub fn solve_lower_transpose<F: Real>(l: &[F], n: usize, b: &mut [F]) {
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// `log|A|` from the Cholesky factor of `A`.
pub fn log_det_from_cholesky<F: Real>(l: &[F], n: usize) -> F {
    let mut s = F::zero();
    for i in 0..n {
        s += l[i * n + i].ln();
    }
    s + s
}

/// `A⁻¹` (row-major) from the Cholesky factor of `A`.
pub fn inverse_from_cholesky<F: Real>(l: &[F], n: usize) -> Vec<F> {
    let mut inv = vec![F::zero(); n * n];
    let mut col = vec![F::zero(); n];
    for j in 0..n {
        col.iter_mut().for_each(|c| *c = F::zero());
        col[j] = F::one();
        solve_lower(l, n, &mut col);
        solve_lower_transpose(l, n, &mut col);
        for i in 0..n {
            inv[i * n + j] = col[i];
        }
    }
    // symmetrize against rounding
    for i in 0..n {
        for j in 0..i {
            let v = (inv[i * n + j] + inv[j * n + i]) * F::c(0.5);
            inv[i * n + j] = v;
            inv[j * n + i] = v;
        }
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_and_solve() {
        let a = [4.0, 2.0, 0.4, 2.0, 5.0, 1.0, 0.4, 1.0, 3.0];
        let l = cholesky(&a, 3).unwrap();
        // L Lᵀ reproduces A
        for i in 0..3 {
            for j in 0..3 {
                let s: f64 = (0..3).map(|k| l[i * 3 + k] * l[j * 3 + k]).sum();
                assert!((s - a[i * 3 + j]).abs() < 1e-14);
            }
        }
        let inv = inverse_from_cholesky(&l, 3);
        for i in 0..3 {
            for j in 0..3 {
                let s: f64 = (0..3).map(|k| a[i * 3 + k] * inv[k * 3 + j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((s - want).abs() < 1e-14);
            }
        }
        // det = 4(15 - 1) - 2(6 - 0.4) + 0.4(2 - 2) = 44.8
        assert!((log_det_from_cholesky(&l, 3) - 44.8f64.ln()).abs() < 1e-13);
    }

    #[test]
    fn rejects_indefinite() {
        assert!(cholesky(&[1.0, 2.0, 2.0, 1.0], 2).is_none());
        assert!(cholesky(&[0.0], 1).is_none());
        assert!(cholesky(&[f64::NAN], 1).is_none());
    }
}
