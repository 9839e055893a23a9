use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let s = a[(i, j)];
            if s == 0.0 {
                continue;
            }
            for k in 0..br {
                for l in 0..bc {
                    out[(i * br + k, j * bc + l)] = s * b[(k, l)];
                }
            }
        }
    }
    out
}

pub fn identity(n: usize) -> DMatrix<f64> {
    DMatrix::identity(n, n)
}

/// Cholesky factorization; on failure adds `1e-8 * trace / n` to the diagonal and retries once.
pub fn cholesky_with_jitter(m: DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    let n = m.nrows();
    match m.clone().cholesky() {
        Some(c) => Ok(c),
        None => {
            let jitter = 1e-8 * m.trace().abs().max(f64::MIN_POSITIVE) / n.max(1) as f64;
            let mut m = m;
            for i in 0..n {
                m[(i, i)] += jitter;
            }
            m.cholesky().ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))
        }
    }
}

pub fn logdet_chol(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

pub fn logdet_spd(m: DMatrix<f64>, what: &str) -> Result<f64> {
    let c = m.cholesky().ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))?;
    Ok(logdet_chol(&c))
}

/// `sum_ij a_ij b_ij`, i.e. `tr(A B)` for symmetric `B`.
pub fn frobenius_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kron_small() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        let k = kron(&a, &b);
        assert_eq!(k, DMatrix::from_row_slice(2, 4, &[0.0, 1.0, 0.0, 2.0, 0.0, 3.0, 0.0, 4.0]));
    }

    #[test]
    fn jitter_rescues_semidefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(cholesky_with_jitter(m, "test").is_ok());
        let neg = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 1.0]);
        assert!(cholesky_with_jitter(neg, "neg").is_err());
    }
}
