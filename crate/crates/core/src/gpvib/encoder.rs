//! Value-level encoder distributions and predictions.

use rand::Rng;
use rand_distr::StandardNormal;

use super::model::{GpVib, SolvePath, SupportTargets};
use super::objective::vib_objective_regression;
use super::task::{Task, TaskKind};
use crate::autodiff::{logsumexp, ParamSet};
use crate::error::{Error, Result};
use crate::kernels::gram;
use crate::linalg::{cholesky, dot, mvn_logpdf, solve_triangular, GaussianNd, LowerTriangular, Matrix, Side, WoodburyFactor};

/// `N(K (K+S)^-1 m, K - K (K+S)^-1 K)`.
pub fn gaussian_encoder(k: &Matrix, s: &[f64], m: &[f64]) -> Result<GaussianNd> {
    let n = k.rows();
    if !k.is_square() || s.len() != n || m.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "K {:?} with {} variances and {} targets",
            k.shape(),
            s.len(),
            m.len()
        )));
    }
    let mut ks = k.clone();
    for (i, si) in s.iter().enumerate() {
        ks[(i, i)] += si;
    }
    let l = cholesky(&ks, 0.0)?;
    let w = solve_triangular(&l, k, Side::Lower)?;
    let z = solve_triangular(&l, &Matrix::column(m), Side::Lower)?;
    let mean = w.transpose().matmul(&z)?.into_vec();
    let cov = k.sub(&w.transpose().matmul(&w)?)?;
    GaussianNd::new(mean, cov.symmetrize())
}

/// Gaussian-likelihood posterior over the support function values.
pub fn exact_posterior(task: &Task, model: &GpVib, params: &ParamSet) -> Result<GaussianNd> {
    if task.kind != TaskKind::Regression {
        return Err(Error::Invalid("exact posterior needs a regression task".into()));
    }
    let k = gram(&task.x_support, &model.cfg.kernel, &model.net, params)?;
    let s = vec![model.noise_var(params); task.n_support()];
    gaussian_encoder(&k, &s, &task.y_support)
}

/// Encoder distribution(s) over the support function values, one per
/// latent function, all sharing a covariance.
pub fn amortized_encoder(task: &Task, model: &GpVib, params: &ParamSet) -> Result<Vec<GaussianNd>> {
    model.check_task(task)?;
    let k = gram(&task.x_support, &model.cfg.kernel, &model.net, params)?;
    let t = model.support_targets(&task.x_support, &task.y_support, params)?;
    (0..t.m.cols())
        .map(|n| {
            let col: Vec<f64> = (0..t.m.rows()).map(|j| t.m[(j, n)]).collect();
            gaussian_encoder(&k, &t.s, &col)
        })
        .collect()
}

enum Solver {
    /// No support points.
    Prior,
    Direct { chol: LowerTriangular, alpha: Matrix },
    Woodbury(Vec<WoodburyFactor>),
}

/// Encoder fitted to a support set, ready for `q(f*)` queries.
pub struct Fitted {
    u: Matrix,
    scale: f64,
    n_outputs: usize,
    noise_var: f64,
    solver: Solver,
}

/// `q(f*)` moments for regression plus the predictive variance of `y*`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegressionPrediction {
    pub mean: f64,
    pub var: f64,
    pub predictive_var: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrediction {
    pub probs: Vec<f64>,
    pub label: usize,
}

impl Fitted {
    pub fn new(targets: SupportTargets, scale: f64, noise_var: f64, path: SolvePath) -> Result<Self> {
        let SupportTargets { u, m, s } = targets;
        let n_outputs = m.cols();
        let solver = if u.rows() == 0 {
            Solver::Prior
        } else {
            match path {
                SolvePath::Direct => {
                    let mut ks = u.matmul_t(&u)?.scale(scale);
                    for (i, si) in s.iter().enumerate() {
                        ks[(i, i)] += si;
                    }
                    let chol = cholesky(&ks, 0.0)?;
                    let alpha = chol.solve(&m)?;
                    Solver::Direct { chol, alpha }
                }
                SolvePath::Woodbury => Solver::Woodbury(
                    (0..n_outputs)
                        .map(|n| {
                            let col: Vec<f64> = (0..m.rows()).map(|j| m[(j, n)]).collect();
                            WoodburyFactor::new(&u, &s, &col, scale)
                        })
                        .collect::<Result<_>>()?,
                ),
            }
        };
        Ok(Self { u, scale, n_outputs, noise_var, solver })
    }

    pub fn n_outputs(&self) -> usize {
        self.n_outputs
    }

    /// Means of `q(f*_n)` for every latent function and their shared variance,
    /// at kernel features `u_star`.
    pub fn moments(&self, u_star: &[f64]) -> Result<(Vec<f64>, f64)> {
        if u_star.len() != self.u.cols() {
            return Err(Error::DimensionMismatch(format!("{} features, expected {}", u_star.len(), self.u.cols())));
        }
        let prior = self.scale * dot(u_star, u_star);
        match &self.solver {
            Solver::Prior => Ok((vec![0.0; self.n_outputs], prior)),
            Solver::Direct { chol, alpha } => {
                let k: Vec<f64> = (0..self.u.rows()).map(|j| self.scale * dot(self.u.row_slice(j), u_star)).collect();
                let kc = Matrix::column(&k);
                let means = (0..self.n_outputs)
                    .map(|n| k.iter().enumerate().map(|(j, kj)| kj * alpha[(j, n)]).sum())
                    .collect();
                let w = solve_triangular(chol, &kc, Side::Lower)?;
                Ok((means, prior - dot(w.as_slice(), w.as_slice())))
            }
            Solver::Woodbury(factors) => {
                let mut means = Vec::with_capacity(factors.len());
                let mut var = 0.0;
                for f in factors {
                    let (m, v) = f.posterior(u_star)?;
                    means.push(m);
                    var = v;
                }
                Ok((means, var))
            }
        }
    }

    pub fn predict_regression(&self, u_star: &[f64]) -> Result<RegressionPrediction> {
        let (means, var) = self.moments(u_star)?;
        Ok(RegressionPrediction { mean: means[0], var, predictive_var: var + self.noise_var })
    }
}

impl GpVib {
    /// Fits the encoder to a support set.
    pub fn fit(&self, params: &ParamSet, x_support: &Matrix, y_support: &[f64]) -> Result<Fitted> {
        let targets = self.support_targets(x_support, y_support, params)?;
        Fitted::new(targets, self.kernel_scale(params), self.noise_var(params), self.cfg.path)
    }

    /// `q(f*)` at an input: per-function means and the shared variance.
    pub fn marginal_q(&self, fitted: &Fitted, params: &ParamSet, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        fitted.moments(&self.kernel_features(x, params)?)
    }

    pub fn predict_regression(&self, fitted: &Fitted, params: &ParamSet, x: &[f64]) -> Result<RegressionPrediction> {
        fitted.predict_regression(&self.kernel_features(x, params)?)
    }

    /// Monte Carlo class probabilities with `mc_samples` draws from `rng`,
    /// and the argmax-of-means label.
    pub fn predict_class(&self, fitted: &Fitted, params: &ParamSet, x: &[f64], rng: &mut impl Rng) -> Result<ClassPrediction> {
        let (means, var) = self.marginal_q(fitted, params, x)?;
        let eps = Matrix::from_fn(self.cfg.mc_samples, means.len(), |_, _| rng.sample(StandardNormal));
        Ok(ClassPrediction { probs: class_probabilities(&means, var, &eps)?, label: argmax_of_means(&means) })
    }
}

/// `E[softmax(f)]` estimated from the rows of `eps`, `f_n = mean_n + sqrt(var) eps_n`.
pub fn class_probabilities(means: &[f64], var: f64, eps: &Matrix) -> Result<Vec<f64>> {
    if eps.cols() != means.len() || eps.rows() == 0 {
        return Err(Error::DimensionMismatch(format!("noise {:?} for {} classes", eps.shape(), means.len())));
    }
    let sd = var.max(0.0).sqrt();
    let mut probs = vec![0.0; means.len()];
    let mut f = vec![0.0; means.len()];
    for r in 0..eps.rows() {
        for (n, fv) in f.iter_mut().enumerate() {
            *fv = means[n] + sd * eps[(r, n)];
        }
        let lse = logsumexp(&f);
        for (p, fv) in probs.iter_mut().zip(&f) {
            *p += (fv - lse).exp();
        }
    }
    let k = eps.rows() as f64;
    Ok(probs.into_iter().map(|p| p / k).collect())
}

/// Index of the largest mean; ties go to the lowest index.
pub fn argmax_of_means(means: &[f64]) -> usize {
    let mut best = 0;
    for (i, m) in means.iter().enumerate() {
        if *m > means[best] {
            best = i;
        }
    }
    best
}

/// The `beta = 1` objective next to the closed-form log marginal likelihood
/// `log N(Y^v | 0, K^v + sigma^2 I)` it lower-bounds. An empty query set
/// has nothing to bound and returns `(0, 0)`.
pub fn elbo_bound_check(task: &Task, model: &GpVib, params: &ParamSet) -> Result<(f64, f64)> {
    if task.kind != TaskKind::Regression {
        return Err(Error::Invalid("bound check needs a regression task".into()));
    }
    if task.n_query() == 0 {
        return Ok((0.0, 0.0));
    }
    let mut m1 = model.clone();
    m1.cfg.beta = 1.0;
    let vib = vib_objective_regression(&m1, task, params)?;
    let kv = gram(&task.x_query, &model.cfg.kernel, &model.net, params)?;
    let g = GaussianNd::new(vec![0.0; task.n_query()], kv.add_diag(model.noise_var(params)))?;
    let marginal = mvn_logpdf(&task.y_query, &g)?;
    Ok((vib, marginal))
}
