use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Extra diagonal loads tried, in order, when a factorization fails. Each
/// step is multiplied by the mean absolute diagonal of the input.
pub const JITTER_LADDER: [f64; 4] = [0.0, 1e-10, 1e-8, 1e-6];

/// Lower-triangular Cholesky factor `L` with `L L^T = A + jitter I`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowerTriangular {
    factor: Matrix,
    jitter: f64,
}

impl LowerTriangular {
    /// Wraps a matrix that is already lower triangular with a positive diagonal.
    pub fn new(factor: Matrix) -> Result<Self> {
        if !factor.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "triangular factor must be square, got {}x{}",
                factor.rows(),
                factor.cols()
            )));
        }
        let n = factor.rows();
        for i in 0..n {
            if !(factor[(i, i)] > 0.0) {
                return Err(Error::Invalid(format!("diagonal entry {i} is not positive")));
            }
            for j in i + 1..n {
                if factor[(i, j)] != 0.0 {
                    return Err(Error::Invalid(format!("entry ({i},{j}) above the diagonal")));
                }
            }
        }
        Ok(Self { factor, jitter: 0.0 })
    }

    pub fn dim(&self) -> usize {
        self.factor.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.factor
    }

    pub fn into_matrix(self) -> Matrix {
        self.factor
    }

    /// Total diagonal load that was added to the input before factorizing.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// `log det(L L^T)`.
    pub fn log_det(&self) -> f64 {
        2.0 * self.factor.diag().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Reconstructs `L L^T`.
    pub fn reconstruct(&self) -> Matrix {
        self.factor.matmul_t(&self.factor).expect("square factor")
    }

    /// Solves `(L L^T) X = B`.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        let y = solve_triangular(self, b, Side::Lower)?;
        solve_triangular(self, &y, Side::LowerTransposed)
    }
}

/// Which triangular system to solve.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    /// `L X = B`
    Lower,
    /// `L^T X = B`
    LowerTransposed,
}

/// Cholesky factorization of a symmetric matrix with an escalating jitter ladder.
///
/// `jitter` is always added; if the factorization still fails the ladder in
/// [`JITTER_LADDER`] is climbed before giving up.
pub fn cholesky(a: &Matrix, jitter: f64) -> Result<LowerTriangular> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "cholesky needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let scale = a.max_abs().max(1.0);
    if a.asymmetry() > 1e-10 * scale {
        return Err(Error::Invalid(format!(
            "cholesky input not symmetric (max deviation {:e})",
            a.asymmetry()
        )));
    }
    let n = a.rows();
    let mean_diag = if n == 0 { 0.0 } else { a.diag().iter().map(|d| d.abs()).sum::<f64>() / n as f64 };
    let mut last = jitter;
    for step in JITTER_LADDER {
        let total = jitter + step * mean_diag;
        last = total;
        if let Some(factor) = factor_lower(a, total) {
            return Ok(LowerTriangular { factor, jitter: total });
        }
    }
    Err(Error::NotPositiveDefinite { jitter: last })
}

fn factor_lower(a: &Matrix, jitter: f64) -> Option<Matrix> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[(i, j)];
            if i == j {
                s += jitter;
            }
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[(i, i)] = s.sqrt();
            } else {
                l[(i, j)] = s / l[(j, j)];
            }
        }
    }
    Some(l)
}

/// Solves `L X = B` or `L^T X = B` column by column.
pub fn solve_triangular(l: &LowerTriangular, b: &Matrix, side: Side) -> Result<Matrix> {
    solve_triangular_raw(l.matrix(), b, side)
}

/// Same as [`solve_triangular`] on an unchecked lower-triangular matrix.
pub(crate) fn solve_triangular_raw(l: &Matrix, b: &Matrix, side: Side) -> Result<Matrix> {
    let n = l.rows();
    if b.rows() != n {
        return Err(Error::DimensionMismatch(format!(
            "triangular solve: factor is {n}x{n}, right-hand side has {} rows",
            b.rows()
        )));
    }
    let m = b.cols();
    let mut x = b.clone();
    match side {
        Side::Lower => {
            for c in 0..m {
                for i in 0..n {
                    let mut s = x[(i, c)];
                    for k in 0..i {
                        s -= l[(i, k)] * x[(k, c)];
                    }
                    x[(i, c)] = s / l[(i, i)];
                }
            }
        }
        Side::LowerTransposed => {
            for c in 0..m {
                for i in (0..n).rev() {
                    let mut s = x[(i, c)];
                    for k in i + 1..n {
                        s -= l[(k, i)] * x[(k, c)];
                    }
                    x[(i, c)] = s / l[(i, i)];
                }
            }
        }
    }
    Ok(x)
}
