//! Deep linear and cosine kernels on top of a [`FeatureNet`].
//!
//! Both kernels are inner products of (possibly normalized) features times
//! a scale, `k(x, x') = c * u(x)^T u(x')`, which is what lets the GP code
//! switch freely between the `n x n` and the `M x M` (Woodbury) forms.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamGroup, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::features::FeatureNet;
use crate::linalg::{dot, Matrix};

/// Norm floor applied before dividing by `||phi||` in the cosine kernel.
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

/// Parameter name of the out-scale `v`.
pub const KERNEL_V: &str = "kernel.v";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Linear,
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    /// Initial out-scale `v`; the multiplier is `exp(v)`.
    pub v: f64,
    /// Fixed linear-kernel multiplier replacing `exp(v)/M`. When set, `v` is
    /// not a trainable parameter.
    pub fixed_variance: Option<f64>,
}

impl KernelSpec {
    pub fn linear() -> Self {
        Self { kind: KernelKind::Linear, v: 0.0, fixed_variance: None }
    }

    pub fn cosine() -> Self {
        Self { kind: KernelKind::Cosine, v: 0.0, fixed_variance: None }
    }

    /// Linear kernel with multiplier `1/M`, the sinusoid setting.
    pub fn linear_fixed(feature_dim: usize) -> Self {
        Self { kind: KernelKind::Linear, v: 0.0, fixed_variance: Some(1.0 / feature_dim as f64) }
    }

    pub fn is_trainable(&self) -> bool {
        self.fixed_variance.is_none()
    }

    pub fn init(&self, params: &mut ParamSet) -> Result<()> {
        if let Some(c) = self.fixed_variance {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config { key: "kernel.fixed_variance".into(), msg: format!("must be positive, got {c}") });
            }
            return Ok(());
        }
        params.insert(KERNEL_V, Matrix::scalar(self.v), ParamGroup::OutScale)
    }

    /// Current `v`: the trained value if present, else the configured one.
    pub fn v_value(&self, params: &ParamSet) -> f64 {
        params.get(KERNEL_V).map(Matrix::item).unwrap_or(self.v)
    }

    /// Multiplier `c` in `k = c * u^T u'`.
    pub fn scale(&self, feature_dim: usize, params: &ParamSet) -> f64 {
        match (self.kind, self.fixed_variance) {
            (KernelKind::Linear, Some(c)) => c,
            (KernelKind::Linear, None) => self.v_value(params).exp() / feature_dim as f64,
            (KernelKind::Cosine, _) => self.v_value(params).exp(),
        }
    }

    /// Kernel on precomputed features.
    pub fn eval_phi(&self, a: &[f64], b: &[f64], params: &ParamSet) -> Result<f64> {
        if a.len() != b.len() {
            return Err(Error::DimensionMismatch(format!("features of length {} and {}", a.len(), b.len())));
        }
        let c = self.scale(a.len(), params);
        match self.kind {
            KernelKind::Linear => Ok(c * dot(a, b)),
            KernelKind::Cosine => {
                let (na, nb) = (norm(a)?, norm(b)?);
                Ok(c * dot(a, b) / (na * nb))
            }
        }
    }

    /// Features after the kernel's own transformation (`u` above).
    pub fn transform(&self, phi: &[f64]) -> Result<Vec<f64>> {
        match self.kind {
            KernelKind::Linear => Ok(phi.to_vec()),
            KernelKind::Cosine => {
                let n = norm(phi)?;
                Ok(phi.iter().map(|p| p / n).collect())
            }
        }
    }

    /// `(u, c)` on a tape, for stacked features `phi` (`n x M`).
    pub fn tape_features(&self, tape: &mut Tape, bound: &Bound, phi: Var) -> Result<(Var, Var)> {
        let (n, m) = tape.shape(phi);
        let v = bound.try_var(KERNEL_V);
        let scale = match (self.kind, self.fixed_variance, v) {
            (KernelKind::Linear, Some(c), _) => tape.scalar(c),
            (KernelKind::Linear, None, Some(v)) => {
                let e = tape.exp(v);
                tape.scale(e, 1.0 / m as f64)
            }
            (KernelKind::Cosine, _, Some(v)) => tape.exp(v),
            (KernelKind::Linear, None, None) => tape.scalar(self.v.exp() / m as f64),
            (KernelKind::Cosine, _, None) => tape.scalar(self.v.exp()),
        };
        let u = match self.kind {
            KernelKind::Linear => phi,
            KernelKind::Cosine => {
                let rows = tape.value(phi);
                if (0..n).any(|i| rows.row_slice(i).iter().all(|&x| x == 0.0)) {
                    return Err(Error::ZeroFeatureVector);
                }
                let sq = tape.square(phi);
                let ss = tape.sum_rows(sq);
                let nrm = tape.sqrt(ss);
                let nrm = tape.clamp(nrm, COSINE_NORM_FLOOR, f64::INFINITY);
                let nrm = tape.expand(nrm, n, m)?;
                tape.div(phi, nrm)?
            }
        };
        Ok((u, scale))
    }
}

fn norm(a: &[f64]) -> Result<f64> {
    let n = dot(a, a).sqrt();
    if n == 0.0 {
        return Err(Error::ZeroFeatureVector);
    }
    Ok(n.max(COSINE_NORM_FLOOR))
}

/// `k(x, x')` through the feature net.
pub fn kernel(x: &[f64], x2: &[f64], spec: &KernelSpec, net: &FeatureNet, params: &ParamSet) -> Result<f64> {
    let a = net.phi(x, params)?;
    let b = net.phi(x2, params)?;
    spec.eval_phi(&a, &b, params)
}

fn features(x: &Matrix, net: &FeatureNet, params: &ParamSet) -> Result<Vec<Vec<f64>>> {
    (0..x.rows()).map(|i| net.phi(x.row_slice(i), params)).collect()
}

/// Gram matrix over the rows of `x`; exactly symmetric.
pub fn gram(x: &Matrix, spec: &KernelSpec, net: &FeatureNet, params: &ParamSet) -> Result<Matrix> {
    let phi = features(x, net, params)?;
    let n = phi.len();
    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = spec.eval_phi(&phi[i], &phi[j], params)?;
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// `k(x_a[i], x_b[j])` for every pair of rows.
pub fn cross_gram(xa: &Matrix, xb: &Matrix, spec: &KernelSpec, net: &FeatureNet, params: &ParamSet) -> Result<Matrix> {
    let pa = features(xa, net, params)?;
    let pb = features(xb, net, params)?;
    let mut k = Matrix::zeros(pa.len(), pb.len());
    for (i, a) in pa.iter().enumerate() {
        for (j, b) in pb.iter().enumerate() {
            k[(i, j)] = spec.eval_phi(a, b, params)?;
        }
    }
    Ok(k)
}

/// Stacked features `Phi` (`n x M`) of the rows of `x`.
pub fn feature_matrix(x: &Matrix, net: &FeatureNet, params: &ParamSet) -> Result<Matrix> {
    let rows = features(x, net, params)?;
    let m = net.feature_dim();
    Matrix::from_vec(rows.len(), m, rows.into_iter().flatten().collect())
}
