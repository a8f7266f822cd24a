//! Dense factorization helpers shared by the GP and EP code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Relative jitter added to Gram diagonals before the first factorization attempt.
pub const BASE_JITTER: f64 = 1e-10;
/// Largest relative jitter tried before giving up.
pub const MAX_JITTER: f64 = 1e-4;

/// A Cholesky factor together with the diagonal jitter that made it succeed.
#[derive(Clone, Debug)]
pub struct JitteredCholesky {
    pub factor: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

/// Factorizes `matrix + jitter·I`, starting from `BASE_JITTER·scale` and
/// escalating ×10 up to `MAX_JITTER·scale`.
pub fn cholesky_with_jitter(matrix: &DMatrix<f64>, scale: f64) -> Result<JitteredCholesky> {
    let n = matrix.nrows();
    let mut rel = BASE_JITTER;
    while rel <= MAX_JITTER * (1.0 + 1e-9) {
        let jitter = rel * scale;
        let mut m = matrix.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(factor) = Cholesky::new(m) {
            if factor.l_dirty().diagonal().iter().all(|d| d.is_finite() && *d > 0.0) {
                return Ok(JitteredCholesky { factor, jitter });
            }
        }
        rel *= 10.0;
    }
    Err(Error::Numerical(format!(
        "matrix of size {n} is not positive definite after jitter {:.1e}",
        MAX_JITTER * scale
    )))
}

/// Solves `L x = b` for the lower-triangular factor.
pub fn solve_lower(chol: &Cholesky<f64, Dyn>, b: &DVector<f64>) -> DVector<f64> {
    chol.l_dirty()
        .solve_lower_triangular(b)
        .expect("cholesky diagonal is nonzero")
}

pub fn solve_lower_mat(chol: &Cholesky<f64, Dyn>, b: &DMatrix<f64>) -> DMatrix<f64> {
    chol.l_dirty()
        .solve_lower_triangular(b)
        .expect("cholesky diagonal is nonzero")
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Log-determinant of the factored matrix.
pub fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jitter_escalates_on_singular_matrix() {
        let m = DMatrix::from_element(3, 3, 1.0);
        let c = cholesky_with_jitter(&m, 1.0).unwrap();
        assert!(c.jitter >= BASE_JITTER);
        assert!(c.jitter <= MAX_JITTER);
    }

    #[test]
    fn indefinite_matrix_fails() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(cholesky_with_jitter(&m, 1.0), Err(Error::Numerical(_))));
    }

    #[test]
    fn log_det_of_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]));
        let c = cholesky_with_jitter(&m, 0.0).unwrap();
        assert!((log_det(&c.factor) - 6f64.ln()).abs() < 1e-12);
    }
}
