//! Small dense symmetric solves for `M×M` kernel matrices.

use crate::error::{Error, Result};

/// Lower Cholesky factor of a row-major `n×n` symmetric matrix, or `None`
/// if it is not numerically positive definite.
pub fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// `A⁻¹` from the Cholesky factor `L` of `A`.
pub fn cholesky_inverse(l: &[f64], n: usize) -> Vec<f64> {
    // L⁻¹ by forward substitution, then A⁻¹ = L⁻ᵀ L⁻¹.
    let mut linv = vec![0.0; n * n];
    for col in 0..n {
        for i in col..n {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for k in col..i {
                s -= l[i * n + k] * linv[k * n + col];
            }
            linv[i * n + col] = s / l[i * n + i];
        }
    }
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (i.max(j)..n).map(|k| linv[k * n + i] * linv[k * n + j]).sum();
            inv[i * n + j] = s;
            inv[j * n + i] = s;
        }
    }
    inv
}

/// `(log det(A + jI), (A + jI)⁻¹, j)` for the first jitter `j` in
/// `start, 10·start, …, max` at which the Cholesky factorization succeeds.
pub fn jittered_logdet_inverse(a: &[f64], n: usize, start: f64, max: f64) -> Result<(f64, Vec<f64>, f64)> {
    if start < 0.0 || max < start {
        return Err(Error::domain("log_det", format!("jitter range [{start}, {max}]")));
    }
    let mut jitter = start;
    loop {
        let mut shifted = a.to_vec();
        for i in 0..n {
            shifted[i * n + i] += jitter;
        }
        if let Some(l) = cholesky(&shifted, n) {
            let logdet = 2.0 * (0..n).map(|i| l[i * n + i].ln()).sum::<f64>();
            return Ok((logdet, cholesky_inverse(&l, n), jitter));
        }
        let next = if jitter == 0.0 { 1e-12 } else { jitter * 10.0 };
        if next > max * (1.0 + 1e-9) {
            return Err(Error::Factorization(format!(
                "{n}x{n} kernel matrix not positive definite with jitter up to {max:e}"
            )));
        }
        jitter = next;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_of_spd_matrix() {
        let a = [4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0];
        let l = cholesky(&a, 3).unwrap();
        let inv = cholesky_inverse(&l, 3);
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| a[i * 3 + k] * inv[k * 3 + j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((v - want).abs() < 1e-12, "({i},{j}) = {v}");
            }
        }
    }

    #[test]
    fn logdet_of_diagonal() {
        let a = [2.0, 0.0, 0.0, 3.0];
        let (ld, _, j) = jittered_logdet_inverse(&a, 2, 0.0, 1e-3).unwrap();
        assert!((ld - 6f64.ln()).abs() < 1e-14);
        assert_eq!(j, 0.0);
    }

    #[test]
    fn escalates_then_fails() {
        // rank-deficient with a negative eigenvalue of -0.5: no small jitter helps
        let a = [1.0, 1.5, 1.5, 1.0];
        assert!(matches!(
            jittered_logdet_inverse(&a, 2, 1e-6, 1e-3),
            Err(Error::Factorization(_))
        ));
        // singular all-ones matrix succeeds once jitter is added
        let ones = [1.0; 4];
        let (_, _, used) = jittered_logdet_inverse(&ones, 2, 1e-6, 1e-3).unwrap();
        assert_eq!(used, 1e-6);
    }
}
