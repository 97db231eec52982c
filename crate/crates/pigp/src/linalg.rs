//! Cholesky-based dense linear algebra helpers.
//!
//! Every covariance factorization in the crate goes through
//! [`cholesky_with_jitter`]: a diagonal inflation of `1e-8 * mean(diag)` is
//! added up front (replicated inputs make exact singularity routine), and on
//! failure the jitter escalates by factors of ten up to `1e-4 * mean(diag)`
//! before the factorization fails loudly with diagnostics. No explicit
//! inverses are formed on solve paths.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

pub const JITTER_REL_START: f64 = 1e-8;
pub const JITTER_REL_MAX: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum NumericalError {
    #[error(
        "covariance is not positive definite after jitter {max_jitter:.3e} \
         (n = {n}, mean diagonal = {mean_diag:.6e})"
    )]
    NotPositiveDefinite {
        n: usize,
        mean_diag: f64,
        max_jitter: f64,
    },
    #[error("dimension mismatch: {0}")]
    Shape(String),
}

/// A successful jittered factorization.
pub struct JitteredCholesky {
    pub chol: Cholesky<f64, Dyn>,
    /// Absolute jitter that was added to the diagonal.
    pub jitter: f64,
}

impl JitteredCholesky {
    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// Explicit inverse; used only where per-parameter traces need it.
    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

/// Factor `a + jitter * I`, escalating jitter per the crate policy.
pub fn cholesky_with_jitter(a: &DMatrix<f64>) -> Result<JitteredCholesky, NumericalError> {
    let n = a.nrows();
    if n == 0 {
        return Err(NumericalError::Shape("empty matrix".into()));
    }
    let mean_diag = a.diagonal().iter().map(|v| v.abs()).sum::<f64>() / n as f64;
    let scale = if mean_diag > 0.0 { mean_diag } else { 1.0 };
    let mut rel = JITTER_REL_START;
    loop {
        let jitter = rel * scale;
        let mut m = a.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(m) {
            return Ok(JitteredCholesky { chol, jitter });
        }
        rel *= 10.0;
        if rel > JITTER_REL_MAX * 1.0001 {
            return Err(NumericalError::NotPositiveDefinite {
                n,
                mean_diag,
                max_jitter: JITTER_REL_MAX * scale,
            });
        }
    }
}

/// Log density of `N(mean, cov)` at `y` using the jittered factorization.
pub fn mvn_logpdf(
    y: &DVector<f64>,
    mean: &DVector<f64>,
    chol: &JitteredCholesky,
) -> Result<f64, NumericalError> {
    let n = y.len();
    if mean.len() != n {
        return Err(NumericalError::Shape(format!(
            "y has {n} entries, mean has {}",
            mean.len()
        )));
    }
    let r = y - mean;
    let alpha = chol.solve(&r);
    Ok(-0.5 * r.dot(&alpha) - 0.5 * chol.log_det() - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// Sample standard deviation (n-1 denominator); 0 for fewer than two values.
pub fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn logpdf_matches_scalar_gaussian() {
        let v: f64 = 2.3;
        let y = DVector::from_vec(vec![0.7]);
        let mean = DVector::from_vec(vec![0.2]);
        let chol = cholesky_with_jitter(&DMatrix::from_vec(1, 1, vec![v])).unwrap();
        let got = mvn_logpdf(&y, &mean, &chol).unwrap();
        let veff = v + chol.jitter;
        let expect = -0.5 * (0.5_f64.powi(2)) / veff
            - 0.5 * veff.ln()
            - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert_relative_eq!(got, expect, max_relative = 1e-12);
    }

    #[test]
    fn jitter_recovers_singular_matrix() {
        // Rank-1 matrix from duplicated rows.
        let a = DMatrix::from_vec(2, 2, vec![1.0, 1.0, 1.0, 1.0]);
        let f = cholesky_with_jitter(&a).unwrap();
        assert!(f.jitter > 0.0 && f.jitter <= JITTER_REL_MAX);
    }

    #[test]
    fn hopeless_matrix_fails_loudly() {
        let a = DMatrix::from_vec(2, 2, vec![1.0, 2.0, 2.0, 1.0]);
        let r = cholesky_with_jitter(&a);
        assert!(matches!(r, Err(NumericalError::NotPositiveDefinite { n: 2, .. })));
    }
}
