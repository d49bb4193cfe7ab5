use rand::Rng;
use serde::{Deserialize, Serialize};

use super::task::{labels, Task, TaskKind};
use crate::autodiff::{ParamGroup, ParamSet};
use crate::error::{Error, Result};
use crate::features::{class_mean_vectors, head_m, head_s, Activation, EncoderHeads, FeatureNet};
use crate::kernels::{KernelKind, KernelSpec};
use crate::linalg::Matrix;

/// Parameter name of the regression likelihood noise `log sigma^2`.
pub const LOG_NOISE: &str = "lik.log_noise";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Gaussian-likelihood posterior: `m = y`, `S = sigma^2 I` (regression only).
    Exact,
    Amortized,
    Simplified,
}

impl EncoderKind {
    pub fn heads(self) -> Option<EncoderHeads> {
        match self {
            EncoderKind::Exact => None,
            EncoderKind::Amortized => Some(EncoderHeads::Amortized),
            EncoderKind::Simplified => Some(EncoderHeads::Simplified),
        }
    }
}

/// How `(K + S)^-1` is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SolvePath {
    /// Cholesky of the `n x n` matrix `K + S`.
    #[default]
    Direct,
    /// Cholesky of the `M x M` matrix `U^T S^-1 U + I/c`.
    Woodbury,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VibConfig {
    pub beta: f64,
    pub mc_samples: usize,
    pub kernel: KernelSpec,
    pub encoder: EncoderKind,
    /// Initial `log sigma^2` of the regression likelihood.
    pub log_noise: f64,
    #[serde(default)]
    pub path: SolvePath,
}

impl VibConfig {
    /// Sinusoid defaults: `beta = 1`, linear kernel with multiplier `1/M`,
    /// exact-posterior encoder, `sigma^2 = 0.01` initially.
    pub fn regression(feature_dim: usize) -> Self {
        Self {
            beta: 1.0,
            mc_samples: 200,
            kernel: KernelSpec::linear_fixed(feature_dim),
            encoder: EncoderKind::Exact,
            log_noise: 0.01f64.ln(),
            path: SolvePath::Direct,
        }
    }

    /// Classification defaults: `beta = 0.001`, trainable linear kernel,
    /// simplified encoder.
    pub fn classification() -> Self {
        Self {
            beta: 0.001,
            mc_samples: 200,
            kernel: KernelSpec::linear(),
            encoder: EncoderKind::Simplified,
            log_noise: 0.01f64.ln(),
            path: SolvePath::Direct,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config { key: "beta".into(), msg: format!("must be >= 0, got {}", self.beta) });
        }
        if self.mc_samples == 0 {
            return Err(Error::Config { key: "mc_samples".into(), msg: "must be >= 1".into() });
        }
        if !self.log_noise.is_finite() {
            return Err(Error::Config { key: "log_noise".into(), msg: "must be finite".into() });
        }
        Ok(())
    }
}

/// A GP-VIB model: feature net, encoder and kernel for one task family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpVib {
    pub net: FeatureNet,
    pub cfg: VibConfig,
    pub kind: TaskKind,
}

/// Encoder inputs on a support set: kernel features `U`, targets `m`
/// (`n x N`) and variances `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportTargets {
    pub u: Matrix,
    pub m: Matrix,
    pub s: Vec<f64>,
}

impl GpVib {
    pub fn new(net: FeatureNet, cfg: VibConfig, kind: TaskKind) -> Result<Self> {
        cfg.validate()?;
        if matches!(kind, TaskKind::Classification { .. }) && cfg.encoder == EncoderKind::Exact {
            return Err(Error::Config {
                key: "encoder".into(),
                msg: "the exact posterior needs a Gaussian likelihood; use amortized or simplified".into(),
            });
        }
        Ok(Self { net, cfg, kind })
    }

    /// Sinusoid setup: features from a `1 -> 40 -> 40` ReLU net and the
    /// regression defaults.
    pub fn sinusoid() -> Self {
        let net = FeatureNet::new(1, &[40, 40], Activation::Relu, false);
        let cfg = VibConfig::regression(net.feature_dim());
        Self { net, cfg, kind: TaskKind::Regression }
    }

    /// Classification setup: `dim -> 64 -> 64` ReLU features with the
    /// constant augmentation and the classification defaults.
    pub fn classifier(dim: usize, n_classes: usize) -> Self {
        let net = FeatureNet::new(dim, &[64, 64], Activation::Relu, true);
        Self { net, cfg: VibConfig::classification(), kind: TaskKind::Classification { n_classes } }
    }

    pub fn n_outputs(&self) -> usize {
        self.kind.n_outputs()
    }

    pub fn is_regression(&self) -> bool {
        self.kind == TaskKind::Regression
    }

    pub fn init_params(&self, rng: &mut impl Rng) -> Result<ParamSet> {
        let mut p = ParamSet::new();
        self.net.init(&mut p, rng)?;
        if let Some(h) = self.cfg.encoder.heads() {
            h.init(self.net.feature_dim(), &mut p, rng)?;
        }
        self.cfg.kernel.init(&mut p)?;
        if self.is_regression() {
            p.insert(LOG_NOISE, Matrix::scalar(self.cfg.log_noise), ParamGroup::Default)?;
        }
        Ok(p)
    }

    /// Likelihood noise `sigma^2` (regression).
    pub fn noise_var(&self, params: &ParamSet) -> f64 {
        params.get(LOG_NOISE).map(Matrix::item).unwrap_or(self.cfg.log_noise).exp()
    }

    /// Kernel multiplier `c` for the current parameters.
    pub fn kernel_scale(&self, params: &ParamSet) -> f64 {
        self.cfg.kernel.scale(self.net.feature_dim(), params)
    }

    /// Kernel features `u(x)` for one input.
    pub fn kernel_features(&self, x: &[f64], params: &ParamSet) -> Result<Vec<f64>> {
        let phi = self.net.phi(x, params)?;
        self.cfg.kernel.transform(&phi)
    }

    /// `(m_n, s)` for one support point with target `y`.
    pub fn point_targets(&self, x: &[f64], y: f64, params: &ParamSet) -> Result<(Vec<f64>, f64)> {
        match (self.kind, self.cfg.encoder.heads()) {
            (TaskKind::Regression, None) => Ok((vec![y], self.noise_var(params))),
            (TaskKind::Regression, Some(h)) => Ok((vec![y], head_s(x, h, &self.net, params)?)),
            (TaskKind::Classification { n_classes }, Some(h)) => {
                let label = labels(&[y], n_classes)?[0];
                let m_tilde = head_m(x, 1.0, h, &self.net, params)?;
                let m = class_mean_vectors(&[label], &[m_tilde], n_classes)?.into_iter().map(|v| v[0]).collect();
                Ok((m, head_s(x, h, &self.net, params)?))
            }
            (TaskKind::Classification { .. }, None) => Err(Error::Invalid("classification needs encoder heads".into())),
        }
    }

    pub fn support_targets(&self, x: &Matrix, y: &[f64], params: &ParamSet) -> Result<SupportTargets> {
        let n = x.rows();
        let big_m = self.net.feature_dim();
        let n_out = self.n_outputs();
        let mut u = Matrix::zeros(n, big_m);
        let mut m = Matrix::zeros(n, n_out);
        let mut s = Vec::with_capacity(n);
        for j in 0..n {
            let uj = self.kernel_features(x.row_slice(j), params)?;
            if uj.len() != big_m {
                return Err(Error::DimensionMismatch(format!("feature dimension {} vs {big_m}", uj.len())));
            }
            for (k, v) in uj.iter().enumerate() {
                u[(j, k)] = *v;
            }
            let (mj, sj) = self.point_targets(x.row_slice(j), y[j], params)?;
            for (k, v) in mj.iter().enumerate() {
                m[(j, k)] = *v;
            }
            s.push(sj);
        }
        Ok(SupportTargets { u, m, s })
    }

    pub fn check_task(&self, task: &Task) -> Result<()> {
        if task.kind != self.kind {
            return Err(Error::Invalid(format!("model is {:?}, task is {:?}", self.kind, task.kind)));
        }
        if task.input_dim() != self.net.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "model takes {} inputs, task has {}",
                self.net.input_dim(),
                task.input_dim()
            )));
        }
        Ok(())
    }

    pub fn supports_streaming(&self) -> bool {
        self.cfg.kernel.kind == KernelKind::Linear
    }
}
