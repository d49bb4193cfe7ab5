use std::f64::consts::PI;

use super::cholesky::{cholesky, solve_triangular, LowerTriangular, Side};
use super::matrix::Matrix;
use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Multivariate Gaussian with a lazily attached Cholesky factor.
#[derive(Clone, Debug)]
pub struct GaussianNd {
    mean: Vec<f64>,
    cov: Matrix,
    chol: Option<LowerTriangular>,
}

impl GaussianNd {
    pub fn new(mean: Vec<f64>, cov: Matrix) -> Result<Self> {
        if !cov.is_square() || cov.rows() != mean.len() {
            return Err(Error::DimensionMismatch(format!(
                "mean of length {} with {}x{} covariance",
                mean.len(),
                cov.rows(),
                cov.cols()
            )));
        }
        if cov.asymmetry() > 1e-10 * cov.max_abs().max(1.0) {
            return Err(Error::Invalid("covariance is not symmetric".into()));
        }
        Ok(Self { mean, cov: cov.symmetrize(), chol: None })
    }

    /// Standard normal in `dim` dimensions.
    pub fn standard(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], cov: Matrix::identity(dim), chol: None }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &Matrix {
        &self.cov
    }

    /// Returns the cached factor, computing it on first use.
    pub fn chol(&mut self) -> Result<&LowerTriangular> {
        if self.chol.is_none() {
            self.chol = Some(cholesky(&self.cov, 0.0)?);
        }
        Ok(self.chol.as_ref().expect("just set"))
    }

    fn factor(&self) -> Result<LowerTriangular> {
        match &self.chol {
            Some(l) => Ok(l.clone()),
            None => cholesky(&self.cov, 0.0),
        }
    }

    /// Marginal `(mean, variance)` of coordinate `i`.
    pub fn marginal(&self, i: usize) -> (f64, f64) {
        (self.mean[i], self.cov[(i, i)])
    }
}

/// Log-density of `x` under `g`, through the Cholesky factor of the covariance.
pub fn mvn_logpdf(x: &[f64], g: &GaussianNd) -> Result<f64> {
    if x.len() != g.dim() {
        return Err(Error::DimensionMismatch(format!(
            "point of length {} for a {}-dimensional Gaussian",
            x.len(),
            g.dim()
        )));
    }
    let l = g.factor()?;
    let diff = Matrix::column(&x.iter().zip(g.mean()).map(|(a, b)| a - b).collect::<Vec<_>>());
    let z = solve_triangular(&l, &diff, Side::Lower)?;
    let quad: f64 = z.as_slice().iter().map(|v| v * v).sum();
    Ok(-0.5 * quad - 0.5 * l.log_det() - 0.5 * g.dim() as f64 * LN_2PI)
}

/// `KL[q || p]` between two Gaussians of equal dimension.
pub fn kl_gaussian(q: &GaussianNd, p: &GaussianNd) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::DimensionMismatch(format!(
            "KL between {}- and {}-dimensional Gaussians",
            q.dim(),
            p.dim()
        )));
    }
    let lq = q.factor()?;
    let lp = p.factor()?;
    let d = q.dim() as f64;
    // tr(Sp^-1 Sq) = ||Lp^-1 Lq||_F^2
    let m = solve_triangular(&lp, lq.matrix(), Side::Lower)?;
    let trace: f64 = m.as_slice().iter().map(|v| v * v).sum();
    let diff = Matrix::column(&p.mean().iter().zip(q.mean()).map(|(a, b)| a - b).collect::<Vec<_>>());
    let z = solve_triangular(&lp, &diff, Side::Lower)?;
    let quad: f64 = z.as_slice().iter().map(|v| v * v).sum();
    Ok(0.5 * (trace + quad - d + lp.log_det() - lq.log_det()))
}

/// Univariate normal log-density.
pub fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (2.0 * PI * var).ln() - 0.5 * d * d / var
}
