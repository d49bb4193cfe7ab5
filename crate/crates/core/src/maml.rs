//! MAML and stochastic MAML for regression.
//!
//! MAML encodes a task as the adapted weights `psi = theta + Delta(theta, D^t)`,
//! where `Delta` is a few full-batch gradient-ascent steps on the support
//! log-likelihood. The stochastic variant perturbs `psi` with Gaussian noise
//! of per-weight variance `s` and penalizes `KL[N(psi, s) || N(theta, s)]`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamGroup, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::features::{Activation, Mlp};
use crate::gpvib::{Task, TaskKind};
use crate::linalg::Matrix;

/// Prefix of the per-weight log-variances of the stochastic variant.
pub const LOG_S_PREFIX: &str = "logs.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MamlConfig {
    /// Inner-loop step size `rho`.
    pub inner_lr: f64,
    pub inner_steps_train: usize,
    pub inner_steps_test: usize,
    pub beta: f64,
    /// Initial `log s` for every weight (stochastic variant).
    pub init_log_s: f64,
    /// Monte Carlo samples of the weight noise (stochastic variant).
    pub mc_samples: usize,
    /// Treat inner-loop gradients as constants.
    pub first_order: bool,
}

impl Default for MamlConfig {
    fn default() -> Self {
        Self {
            inner_lr: 0.01,
            inner_steps_train: 1,
            inner_steps_test: 10,
            beta: 1e-3,
            init_log_s: -10.0,
            mc_samples: 1,
            first_order: false,
        }
    }
}

impl MamlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_lr > 0.0 && self.inner_lr.is_finite()) {
            return Err(Error::Config { key: "maml.inner_lr".into(), msg: format!("must be > 0, got {}", self.inner_lr) });
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config { key: "maml.beta".into(), msg: format!("must be >= 0, got {}", self.beta) });
        }
        if self.mc_samples == 0 {
            return Err(Error::Config { key: "maml.mc_samples".into(), msg: "must be >= 1".into() });
        }
        Ok(())
    }
}

/// `steps` gradient-ascent updates `psi <- psi + rho * grad loglik(psi)`.
///
/// Gradients are recorded on the tape, so the result stays differentiable
/// in the initial weights unless `first_order` is set. Weights that are
/// constants on the tape are copied into fresh leaves before adapting.
pub fn inner_adapt<F>(tape: &mut Tape, weights: &[Var], loglik: F, rho: f64, steps: usize, first_order: bool) -> Result<Vec<Var>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut psi: Vec<Var> = weights.to_vec();
    if steps == 0 {
        return Ok(psi);
    }
    for w in psi.iter_mut() {
        if !tape.requires_grad(*w) {
            *w = tape.leaf(tape.value(*w).clone());
        }
    }
    for _ in 0..steps {
        let ll = loglik(tape, &psi)?;
        let grads = tape.grad(ll, &psi)?;
        let mut next = Vec::with_capacity(psi.len());
        for (i, (p, g)) in psi.iter().zip(grads).enumerate() {
            if !tape.value(g).is_finite() {
                return Err(Error::NonFiniteGradient(format!("inner-loop weight {i}")));
            }
            let g = if first_order { tape.constant(tape.value(g).clone()) } else { g };
            let step = tape.scale(g, rho);
            next.push(tape.add(*p, step)?);
        }
        psi = next;
    }
    Ok(psi)
}

/// `KL[N(theta + delta, s) || N(theta, s)] = 1/2 sum delta^2 / s`, with `s = exp(log_s)`.
pub fn shift_kl(tape: &mut Tape, delta: &[Var], log_s: &[Var]) -> Result<Var> {
    let mut total = tape.scalar(0.0);
    for (d, ls) in delta.iter().zip(log_s) {
        let d2 = tape.square(*d);
        let neg = tape.neg(*ls);
        let inv = tape.exp(neg);
        let r = tape.mul(d2, inv)?;
        let r = tape.sum(r);
        total = tape.add(total, r)?;
    }
    Ok(tape.scale(total, 0.5))
}

/// Weight-noise draws: `eps[k][i]` perturbs weight tensor `i` in sample `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightNoise {
    pub eps: Vec<Vec<Matrix>>,
}

impl WeightNoise {
    pub fn sample(shapes: &[(usize, usize)], samples: usize, rng: &mut impl Rng) -> Self {
        let eps = (0..samples)
            .map(|_| shapes.iter().map(|&(r, c)| Matrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))).collect())
            .collect();
        Self { eps }
    }
}

/// `mean_k loglik(psi + sqrt(s) eps_k) - beta * KL[N(psi, s) || N(theta, s)]`.
pub fn stochastic_objective<F>(
    tape: &mut Tape,
    theta: &[Var],
    psi: &[Var],
    log_s: &[Var],
    loglik: F,
    noise: &WeightNoise,
    beta: f64,
) -> Result<(Var, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if noise.eps.is_empty() {
        return Err(Error::Invalid("stochastic objective needs at least one noise sample".into()));
    }
    let mut sd = Vec::with_capacity(log_s.len());
    for ls in log_s {
        let h = tape.scale(*ls, 0.5);
        sd.push(tape.exp(h));
    }
    let mut acc = tape.scalar(0.0);
    for sample in &noise.eps {
        let mut w = Vec::with_capacity(psi.len());
        for ((p, s), e) in psi.iter().zip(&sd).zip(sample) {
            let e = tape.constant(e.clone());
            let jitter = tape.mul(*s, e)?;
            w.push(tape.add(*p, jitter)?);
        }
        let ll = loglik(tape, &w)?;
        acc = tape.add(acc, ll)?;
    }
    let data = tape.scale(acc, 1.0 / noise.eps.len() as f64);
    let mut delta = Vec::with_capacity(psi.len());
    for (p, t) in psi.iter().zip(theta) {
        delta.push(tape.sub(*p, *t)?);
    }
    let kl = shift_kl(tape, &delta, log_s)?;
    let pen = tape.scale(kl, beta);
    Ok((tape.sub(data, pen)?, kl))
}

/// MAML regression model: an MLP `x -> y` plus the inner-loop settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Maml {
    pub net: Mlp,
    pub cfg: MamlConfig,
    pub stochastic: bool,
}

impl Maml {
    /// The sinusoid network `1 -> 40 -> 40 -> 1` with ReLU.
    pub fn sinusoid(cfg: MamlConfig, stochastic: bool) -> Self {
        Self::new(1, &[40, 40], Activation::Relu, cfg, stochastic)
    }

    pub fn new(input_dim: usize, hidden: &[usize], activation: Activation, cfg: MamlConfig, stochastic: bool) -> Self {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Self { net: Mlp { prefix: "net".into(), sizes, activation, activate_last: false }, cfg, stochastic }
    }

    pub fn weight_names(&self) -> Vec<String> {
        self.net.param_names()
    }

    pub fn log_s_names(&self) -> Vec<String> {
        self.weight_names().iter().map(|n| format!("{LOG_S_PREFIX}{n}")).collect()
    }

    pub fn init_params(&self, rng: &mut impl Rng) -> Result<ParamSet> {
        self.cfg.validate()?;
        let mut p = ParamSet::new();
        self.net.init(&mut p, rng)?;
        if self.stochastic {
            for (w, ls) in self.weight_names().iter().zip(self.log_s_names()) {
                let shape = p.get(w).expect("just inserted").shape();
                p.insert(ls, Matrix::filled(shape.0, shape.1, self.cfg.init_log_s), ParamGroup::Default)?;
            }
        }
        Ok(p)
    }

    fn weights(&self, bound: &Bound) -> Result<Vec<Var>> {
        self.weight_names().iter().map(|n| bound.var(n)).collect()
    }

    /// `-MSE` of the network with weights `w` on `(x, y)`.
    pub fn loglik(&self, tape: &mut Tape, w: &[Var], x: &Matrix, y: &[f64]) -> Result<Var> {
        if x.rows() == 0 {
            return Ok(tape.scalar(0.0));
        }
        let xv = tape.constant(x.clone());
        let out = self.net.forward_with(tape, w, xv)?;
        let yv = tape.constant(Matrix::column(y));
        let r = tape.sub(out, yv)?;
        let r2 = tape.square(r);
        let s = tape.sum(r2);
        Ok(tape.scale(s, -1.0 / x.rows() as f64))
    }

    fn check_task(&self, task: &Task) -> Result<()> {
        if task.kind != TaskKind::Regression {
            return Err(Error::Invalid("MAML baselines are regression-only".into()));
        }
        if task.input_dim() != self.net.sizes[0] {
            return Err(Error::DimensionMismatch(format!(
                "network takes {} inputs, task has {}",
                self.net.sizes[0],
                task.input_dim()
            )));
        }
        Ok(())
    }

    /// Adapted weights after `steps` inner steps on the support set.
    pub fn adapt(&self, tape: &mut Tape, bound: &Bound, task: &Task, steps: usize) -> Result<(Vec<Var>, Vec<Var>)> {
        self.check_task(task)?;
        let theta = self.weights(bound)?;
        let psi = inner_adapt(
            tape,
            &theta,
            |t, w| self.loglik(t, w, &task.x_support, &task.y_support),
            self.cfg.inner_lr,
            steps,
            self.cfg.first_order,
        )?;
        Ok((theta, psi))
    }

    /// `log p(D^v | theta + Delta(theta, D^t))` with the training step count.
    pub fn maml_objective(&self, tape: &mut Tape, bound: &Bound, task: &Task) -> Result<Var> {
        let (_, psi) = self.adapt(tape, bound, task, self.cfg.inner_steps_train)?;
        self.loglik(tape, &psi, &task.x_query, &task.y_query)
    }

    /// Stochastic MAML objective and its KL term.
    pub fn stochastic_maml_objective(&self, tape: &mut Tape, bound: &Bound, task: &Task, noise: &WeightNoise) -> Result<(Var, Var)> {
        let (theta, psi) = self.adapt(tape, bound, task, self.cfg.inner_steps_train)?;
        let log_s: Vec<Var> = self.log_s_names().iter().map(|n| bound.var(n)).collect::<Result<_>>()?;
        stochastic_objective(
            tape,
            &theta,
            &psi,
            &log_s,
            |t, w| self.loglik(t, w, &task.x_query, &task.y_query),
            noise,
            self.cfg.beta,
        )
    }

    pub fn sample_noise(&self, params: &ParamSet, rng: &mut impl Rng) -> WeightNoise {
        let shapes: Vec<(usize, usize)> =
            self.weight_names().iter().map(|n| params.get(n).map(Matrix::shape).unwrap_or((0, 0))).collect();
        WeightNoise::sample(&shapes, self.cfg.mc_samples, rng)
    }

    /// Objective for training; the KL part is 0 for plain MAML.
    pub fn objective(&self, tape: &mut Tape, bound: &Bound, task: &Task, noise: Option<&WeightNoise>) -> Result<(Var, Var)> {
        if self.stochastic {
            let noise = noise.ok_or_else(|| Error::Invalid("stochastic MAML needs weight noise".into()))?;
            self.stochastic_maml_objective(tape, bound, task, noise)
        } else {
            let v = self.maml_objective(tape, bound, task)?;
            Ok((v, tape.scalar(0.0)))
        }
    }

    /// Adapted weight values after `steps` inner steps (test time).
    pub fn adapted_params(&self, params: &ParamSet, task: &Task, steps: usize) -> Result<ParamSet> {
        let mut tape = Tape::new();
        let bound = params.bind_const(&mut tape);
        let (_, psi) = self.adapt(&mut tape, &bound, task, steps)?;
        let mut out = params.clone();
        for (name, v) in self.weight_names().iter().zip(psi) {
            *out.get_mut(name).expect("weight present") = tape.value(v).clone();
        }
        Ok(out)
    }

    pub fn predict(&self, params: &ParamSet, x: &[f64]) -> Result<f64> {
        Ok(self.net.eval(x, params)?[0])
    }
}
