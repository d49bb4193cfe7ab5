//! Low-rank-plus-diagonal Gaussian computations.
//!
//! For a covariance `c * Phi Phi^T + diag(s)` with `Phi` of shape `n x M`,
//! everything below is evaluated through the `M x M` matrix
//! `B = Phi^T S^-1 Phi + I / c`, so the cost is `O(n M^2 + M^3)`.

use super::cholesky::{cholesky, solve_triangular, LowerTriangular, Side};
use super::gaussian::LN_2PI;
use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

/// Precomputed `B = Phi^T S^-1 Phi + I/c` factor together with `b = Phi^T S^-1 m`.
#[derive(Clone, Debug)]
pub struct WoodburyFactor {
    chol: LowerTriangular,
    /// `L^-1 b`
    whitened_b: Vec<f64>,
    out_scale: f64,
}

impl WoodburyFactor {
    /// Builds the factor from the sufficient statistics `A = Phi^T S^-1 Phi` and `b`.
    pub fn from_stats(a: &Matrix, b: &[f64], out_scale: f64) -> Result<Self> {
        if !(out_scale > 0.0) {
            return Err(Error::Invalid(format!("out_scale must be positive, got {out_scale}")));
        }
        if a.rows() != b.len() {
            return Err(Error::DimensionMismatch(format!(
                "statistics matrix is {}x{}, vector has length {}",
                a.rows(),
                a.cols(),
                b.len()
            )));
        }
        let chol = cholesky(&a.add_diag(1.0 / out_scale), 0.0)?;
        let whitened_b = solve_triangular(&chol, &Matrix::column(b), Side::Lower)?.into_vec();
        Ok(Self { chol, whitened_b, out_scale })
    }

    pub fn new(phi: &Matrix, s_diag: &[f64], m: &[f64], out_scale: f64) -> Result<Self> {
        let (a, b) = stats(phi, s_diag, m)?;
        Self::from_stats(&a, &b, out_scale)
    }

    /// Posterior `(mean, var)` of `f* = phi_star^T w`.
    pub fn posterior(&self, phi_star: &[f64]) -> Result<(f64, f64)> {
        if phi_star.len() != self.chol.dim() {
            return Err(Error::DimensionMismatch(format!(
                "feature of length {} for a rank-{} factor",
                phi_star.len(),
                self.chol.dim()
            )));
        }
        let u = solve_triangular(&self.chol, &Matrix::column(phi_star), Side::Lower)?.into_vec();
        Ok((dot(&u, &self.whitened_b), dot(&u, &u)))
    }

    pub fn out_scale(&self) -> f64 {
        self.out_scale
    }
}

fn stats(phi: &Matrix, s_diag: &[f64], m: &[f64]) -> Result<(Matrix, Vec<f64>)> {
    let (n, big_m) = phi.shape();
    if s_diag.len() != n || m.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "Phi has {n} rows, S has {}, m has {}",
            s_diag.len(),
            m.len()
        )));
    }
    if s_diag.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Invalid("diagonal noise entries must be positive".into()));
    }
    let mut a = Matrix::zeros(big_m, big_m);
    let mut b = vec![0.0; big_m];
    for j in 0..n {
        let row = phi.row_slice(j);
        let w = 1.0 / s_diag[j];
        for p in 0..big_m {
            b[p] += row[p] * m[j] * w;
            for q in 0..big_m {
                a[(p, q)] += row[p] * row[q] * w;
            }
        }
    }
    Ok((a, b))
}

/// `log N(m | 0, c Phi Phi^T + diag(s))` using only an `M x M` factorization.
pub fn woodbury_logpdf(phi: &Matrix, s_diag: &[f64], m: &[f64], out_scale: f64) -> Result<f64> {
    let n = phi.rows();
    let big_m = phi.cols();
    if n == 0 || big_m == 0 {
        return Err(Error::DimensionMismatch("woodbury_logpdf needs n, M >= 1".into()));
    }
    let factor = WoodburyFactor::new(phi, s_diag, m, out_scale)?;
    let log_det = s_diag.iter().map(|s| s.ln()).sum::<f64>()
        + big_m as f64 * out_scale.ln()
        + factor.chol.log_det();
    let quad = m.iter().zip(s_diag).map(|(mj, sj)| mj * mj / sj).sum::<f64>()
        - dot(&factor.whitened_b, &factor.whitened_b);
    Ok(-0.5 * quad - 0.5 * log_det - 0.5 * n as f64 * LN_2PI)
}

/// Posterior moments of `f*` given observations `m` with noise `s`, via the
/// `M x M` system.
pub fn woodbury_posterior(
    phi: &Matrix,
    s_diag: &[f64],
    m: &[f64],
    out_scale: f64,
    phi_star: &[f64],
) -> Result<(f64, f64)> {
    WoodburyFactor::new(phi, s_diag, m, out_scale)?.posterior(phi_star)
}
