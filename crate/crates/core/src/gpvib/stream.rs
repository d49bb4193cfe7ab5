//! Constant-memory online prediction for the linear kernel.
//!
//! Only `A = sum_j u_j u_j^T / s_j` and `b_n = sum_j u_j m_nj / s_j` are kept,
//! so memory is `O(N M + M^2)` however many points have been ingested.

use serde::{Deserialize, Serialize};

use super::model::GpVib;
use crate::autodiff::ParamSet;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, WoodburyFactor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamState {
    /// One `b_n` per latent function.
    pub b: Vec<Vec<f64>>,
    pub a: Matrix,
    pub count: usize,
}

impl StreamState {
    pub fn new(n_outputs: usize, feature_dim: usize) -> Self {
        Self { b: vec![vec![0.0; feature_dim]; n_outputs], a: Matrix::zeros(feature_dim, feature_dim), count: 0 }
    }

    pub fn feature_dim(&self) -> usize {
        self.a.rows()
    }

    /// Adds one point with features `u`, targets `m` (one per function) and variance `s`.
    pub fn ingest(&mut self, u: &[f64], m: &[f64], s: f64) -> Result<()> {
        let d = self.feature_dim();
        if u.len() != d || m.len() != self.b.len() {
            return Err(Error::DimensionMismatch(format!(
                "point with {} features and {} targets for a {d}-dim state with {} functions",
                u.len(),
                m.len(),
                self.b.len()
            )));
        }
        if !(s > 0.0) {
            return Err(Error::Invalid(format!("variance must be positive, got {s}")));
        }
        for (bn, mn) in self.b.iter_mut().zip(m) {
            for (bi, ui) in bn.iter_mut().zip(u) {
                *bi += ui * mn / s;
            }
        }
        for i in 0..d {
            for j in 0..d {
                self.a[(i, j)] += u[i] * u[j] / s;
            }
        }
        self.count += 1;
        Ok(())
    }

    /// Posterior means (one per function) and shared variance at `u_star`.
    pub fn predict(&self, u_star: &[f64], out_scale: f64) -> Result<(Vec<f64>, f64)> {
        let mut means = Vec::with_capacity(self.b.len());
        let mut var = 0.0;
        for bn in &self.b {
            let (m, v) = WoodburyFactor::from_stats(&self.a, bn, out_scale)?.posterior(u_star)?;
            means.push(m);
            var = v;
        }
        Ok((means, var))
    }
}

impl GpVib {
    fn require_linear(&self) -> Result<()> {
        if self.supports_streaming() {
            Ok(())
        } else {
            Err(Error::StreamRequiresLinearKernel)
        }
    }

    pub fn stream_state(&self) -> Result<StreamState> {
        self.require_linear()?;
        Ok(StreamState::new(self.n_outputs(), self.net.feature_dim()))
    }

    /// Ingests one support point `(x, y)` with the current (fixed) parameters.
    pub fn stream_ingest(&self, state: &mut StreamState, params: &ParamSet, x: &[f64], y: f64) -> Result<()> {
        self.require_linear()?;
        let u = self.kernel_features(x, params)?;
        let (m, s) = self.point_targets(x, y, params)?;
        state.ingest(&u, &m, s)
    }

    pub fn stream_predict(&self, state: &StreamState, params: &ParamSet, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.require_linear()?;
        state.predict(&self.kernel_features(x, params)?, self.kernel_scale(params))
    }
}
