//! Per-task GP-VIB objectives recorded on a tape.
//!
//! Both objectives share the GP part: the support targets `m` (one column
//! per latent function) and variances `s` define the encoder
//! `q(f) ∝ p(f) N(m | f, S)`, and the complexity term is
//!
//! ```text
//! KL[q(f^t) || p(f^t)] = sum_j E_q[log N(m_j | f_j, s_j)] - log N(m | 0, K + S)
//! ```
//!
//! summed over the latent functions. One factorization of `K + S` (or of
//! its `M x M` Woodbury counterpart) is shared by every column.

use rand::Rng;
use rand_distr::StandardNormal;

use super::model::{EncoderKind, GpVib, SolvePath, LOG_NOISE};
use super::task::{Task, TaskKind};
use crate::autodiff::{Bound, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::features::class_sign_matrix;
use crate::linalg::{Matrix, LN_2PI};

/// Floor on the predictive variance before taking its square root for
/// reparameterized samples.
const VAR_FLOOR: f64 = 1e-18;

/// Objective value plus its parts, all scalar nodes.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveParts {
    /// `data - beta * kl`, to be maximized.
    pub value: Var,
    /// Expected query log-likelihood.
    pub data: Var,
    /// `KL[q(f^t) || p(f^t)]`, summed over latent functions.
    pub kl: Var,
}

/// Standard-normal draws for the Monte Carlo softmax term: row
/// `s * n_query + j`, column `n` perturbs class `n` at query point `j` in
/// sample `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassNoise {
    pub samples: usize,
    pub eps: Matrix,
}

impl ClassNoise {
    pub fn sample(samples: usize, n_query: usize, n_classes: usize, rng: &mut impl Rng) -> Self {
        let eps = Matrix::from_fn(samples * n_query, n_classes, |_, _| rng.sample(StandardNormal));
        Self { samples, eps }
    }

    /// Noise for the relabeled problem where class `n` becomes `perm[n]`.
    pub fn permute_classes(&self, perm: &[usize]) -> Self {
        let mut eps = Matrix::zeros(self.eps.rows(), self.eps.cols());
        for i in 0..eps.rows() {
            for (n, &p) in perm.iter().enumerate() {
                eps[(i, p)] = self.eps[(i, n)];
            }
        }
        Self { samples: self.samples, eps }
    }
}

/// Factorization of `K + S` in one of the two equivalent forms.
enum Solver {
    Direct { l: Var, alpha: Var, u_t: Var, c: Var },
    Woodbury { lb: Var, w: Var },
}

struct GpPart {
    solver: Solver,
    /// `m^T (K + S)^-1 m` summed over columns.
    quad: Var,
    /// `log det (K + S)`.
    log_det: Var,
}

fn check_column(tape: &Tape, v: Var, rows: usize, what: &str) -> Result<()> {
    if tape.shape(v) != (rows, 1) {
        return Err(Error::DimensionMismatch(format!("{what}: expected {rows}x1, got {:?}", tape.shape(v))));
    }
    Ok(())
}

fn factor(tape: &mut Tape, u_t: Var, c: Var, m: Var, s: Var, path: SolvePath) -> Result<GpPart> {
    let (nt, big_m) = tape.shape(u_t);
    let n_out = tape.shape(m).1;
    if tape.shape(m).0 != nt {
        return Err(Error::DimensionMismatch(format!("{} targets for {nt} support points", tape.shape(m).0)));
    }
    check_column(tape, s, nt, "support variances")?;
    match path {
        SolvePath::Direct => {
            let ut_t = tape.transpose(u_t);
            let outer = tape.matmul(u_t, ut_t)?;
            let cc = tape.expand(c, nt, nt)?;
            let k = tape.mul(cc, outer)?;
            let sd = tape.diag_embed(s);
            let ks = tape.add(k, sd)?;
            let l = tape.cholesky(ks)?;
            let a = tape.solve_lower(l, m)?;
            let alpha = tape.solve_lower_t(l, a)?;
            let a2 = tape.square(a);
            let quad = tape.sum_sorted(a2);
            let log_det = tape.log_det_from_chol(l);
            Ok(GpPart { solver: Solver::Direct { l, alpha, u_t, c }, quad, log_det })
        }
        SolvePath::Woodbury => {
            let rs = tape.sqrt(s);
            let isq = tape.recip(rs);
            let isq_u = tape.expand(isq, nt, big_m)?;
            let ut = tape.mul(u_t, isq_u)?;
            let ut_t = tape.transpose(ut);
            let gram = tape.matmul(ut_t, ut)?;
            let ic = tape.recip(c);
            let ic = tape.expand(ic, big_m, 1)?;
            let ic = tape.diag_embed(ic);
            let b = tape.add(gram, ic)?;
            let lb = tape.cholesky(b)?;
            let isq_m = tape.expand(isq, nt, n_out)?;
            let mt = tape.mul(m, isq_m)?;
            let bm = tape.matmul(ut_t, mt)?;
            let z = tape.solve_lower(lb, bm)?;
            let w = tape.solve_lower_t(lb, z)?;
            let mt2 = tape.square(mt);
            let mt2 = tape.sum_sorted(mt2);
            let z2 = tape.square(z);
            let z2 = tape.sum_sorted(z2);
            let quad = tape.sub(mt2, z2)?;
            let ls = tape.log(s);
            let ls = tape.sum(ls);
            let lc = tape.log(c);
            let lc = tape.scale(lc, big_m as f64);
            let lb_det = tape.log_det_from_chol(lb);
            let log_det = tape.add(ls, lc)?;
            let log_det = tape.add(log_det, lb_det)?;
            Ok(GpPart { solver: Solver::Woodbury { lb, w }, quad, log_det })
        }
    }
}

impl GpPart {
    /// Means (`n x N`) and shared variances (`n x 1`) of `q(f)` at features `u_q`.
    fn moments(&self, tape: &mut Tape, u_q: Var) -> Result<(Var, Var)> {
        let nq = tape.shape(u_q).0;
        match self.solver {
            Solver::Direct { l, alpha, u_t, c } => {
                let uq2 = tape.square(u_q);
                let prior = tape.sum_rows(uq2);
                let cq = tape.expand(c, nq, 1)?;
                let prior = tape.mul(cq, prior)?;
                let nt = tape.shape(u_t).0;
                let ut_t = tape.transpose(u_t);
                let cross = tape.matmul(u_q, ut_t)?;
                let cc = tape.expand(c, nq, nt)?;
                let kq = tape.mul(cc, cross)?;
                let mean = tape.matmul(kq, alpha)?;
                let kq_t = tape.transpose(kq);
                let w = tape.solve_lower(l, kq_t)?;
                let w2 = tape.square(w);
                let red = tape.sum_cols(w2);
                let red = tape.transpose(red);
                let var = tape.sub(prior, red)?;
                Ok((mean, var))
            }
            Solver::Woodbury { lb, w } => {
                let mean = tape.matmul(u_q, w)?;
                let uq_t = tape.transpose(u_q);
                let v = tape.solve_lower(lb, uq_t)?;
                let v2 = tape.square(v);
                let var = tape.sum_cols(v2);
                let var = tape.transpose(var);
                Ok((mean, var))
            }
        }
    }

    /// `sum_n KL[q_n(f^t) || p(f^t)]`.
    fn kl(&self, tape: &mut Tape, u_t: Var, m: Var, s: Var) -> Result<Var> {
        let (nt, n_out) = tape.shape(m);
        let (mean_t, var_t) = self.moments(tape, u_t)?;
        let r = tape.sub(m, mean_t)?;
        let r2 = tape.square(r);
        let vt = tape.expand(var_t, nt, n_out)?;
        let num = tape.add(r2, vt)?;
        let s2 = tape.scale(s, 2.0);
        let s2 = tape.expand(s2, nt, n_out)?;
        let e = tape.div(num, s2)?;
        let e = tape.sum_sorted(e);
        let ls = tape.log(s);
        let ls = tape.sum(ls);
        let ls = tape.scale(ls, 0.5 * n_out as f64);
        // -E[log N(m | f, S)] without the 2*pi terms, which cancel against the prior's.
        let neg_e = tape.add(e, ls)?;
        let q = tape.scale(self.quad, -0.5);
        let ld = tape.scale(self.log_det, -0.5 * n_out as f64);
        let log_prior = tape.add(q, ld)?;
        let total = tape.add(neg_e, log_prior)?;
        Ok(tape.neg(total))
    }
}

/// Kernel features `u` and scale `c` for the rows of a constant input matrix.
fn tape_features(model: &GpVib, tape: &mut Tape, bound: &Bound, x: &Matrix) -> Result<(Var, Var, Var)> {
    let xv = tape.constant(x.clone());
    let phi = model.net.forward(tape, bound, xv)?;
    let (u, c) = model.cfg.kernel.tape_features(tape, bound, phi)?;
    Ok((phi, u, c))
}

/// Support targets and variances on the tape.
fn support_terms(model: &GpVib, tape: &mut Tape, bound: &Bound, task: &Task, phi_t: Var) -> Result<(Var, Var)> {
    let nt = task.n_support();
    match (task.kind, model.cfg.encoder) {
        (TaskKind::Regression, EncoderKind::Exact) => {
            let ln = bound.var(LOG_NOISE)?;
            let var = tape.exp(ln);
            let s = tape.expand(var, nt, 1)?;
            let m = tape.constant(Matrix::column(&task.y_support));
            Ok((m, s))
        }
        (TaskKind::Regression, enc) => {
            let h = enc.heads().expect("non-exact encoder has heads");
            let s = h.s(tape, bound, phi_t)?;
            let m = tape.constant(Matrix::column(&task.y_support));
            Ok((m, s))
        }
        (TaskKind::Classification { n_classes }, enc) => {
            let h = enc.heads().ok_or_else(|| Error::Invalid("classification needs encoder heads".into()))?;
            let m_tilde = h.m_tilde(tape, bound, phi_t)?;
            let s = h.s(tape, bound, phi_t)?;
            let signs = tape.constant(class_sign_matrix(&task.support_labels()?, n_classes)?);
            let mt = tape.expand(m_tilde, nt, n_classes)?;
            let m = tape.mul(signs, mt)?;
            Ok((m, s))
        }
    }
}

struct Encoded {
    gp: GpPart,
    kl: Var,
    u_v: Var,
}

fn encode(model: &GpVib, tape: &mut Tape, bound: &Bound, task: &Task) -> Result<Encoded> {
    model.check_task(task)?;
    if task.n_support() == 0 {
        return Err(Error::Invalid("the objective needs at least one support point".into()));
    }
    let (phi_t, u_t, c) = tape_features(model, tape, bound, &task.x_support)?;
    let (m, s) = support_terms(model, tape, bound, task, phi_t)?;
    let gp = factor(tape, u_t, c, m, s, model.cfg.path)?;
    let kl = gp.kl(tape, u_t, m, s)?;
    let u_v = if task.n_query() == 0 {
        u_t
    } else {
        let xv = tape.constant(task.x_query.clone());
        let phi_v = model.net.forward(tape, bound, xv)?;
        model.cfg.kernel.tape_features(tape, bound, phi_v)?.0
    };
    Ok(Encoded { gp, kl, u_v })
}

fn combine(tape: &mut Tape, data: Var, kl: Var, beta: f64) -> Result<ObjectiveParts> {
    let pen = tape.scale(kl, beta);
    let value = tape.sub(data, pen)?;
    Ok(ObjectiveParts { value, data, kl })
}

/// GP-VIB regression objective with closed-form Gaussian expectations:
///
/// ```text
/// sum_j E_q(f^v_j)[log N(y^v_j | f^v_j, sigma^2)] - beta * KL
/// ```
pub fn regression_objective(model: &GpVib, tape: &mut Tape, bound: &Bound, task: &Task) -> Result<ObjectiveParts> {
    if task.kind != TaskKind::Regression {
        return Err(Error::Invalid("regression objective on a classification task".into()));
    }
    let enc = encode(model, tape, bound, task)?;
    let nv = task.n_query();
    let data = if nv == 0 {
        tape.scalar(0.0)
    } else {
        let (mean, var) = enc.gp.moments(tape, enc.u_v)?;
        let y = tape.constant(Matrix::column(&task.y_query));
        let r = tape.sub(y, mean)?;
        let r2 = tape.square(r);
        let num = tape.add(r2, var)?;
        let num = tape.sum(num);
        let ln = bound.var(LOG_NOISE)?;
        let inv = tape.neg(ln);
        let inv = tape.exp(inv);
        let fit = tape.mul(num, inv)?;
        let fit = tape.scale(fit, -0.5);
        let norm = tape.add_scalar(ln, LN_2PI);
        let norm = tape.scale(norm, -0.5 * nv as f64);
        tape.add(fit, norm)?
    };
    combine(tape, data, enc.kl, model.cfg.beta)
}

/// Monte Carlo estimate of `sum_j E[log softmax(f_j)_{y_j}]` with
/// `f_{n,j} = mean[j, n] + sqrt(var[j]) * eps`.
pub fn mc_softmax_term(tape: &mut Tape, mean: Var, var: Var, labels: &[usize], noise: &ClassNoise) -> Result<Var> {
    let (nv, n_classes) = tape.shape(mean);
    check_column(tape, var, nv, "query variances")?;
    if labels.len() != nv {
        return Err(Error::DimensionMismatch(format!("{} labels for {nv} query points", labels.len())));
    }
    if noise.eps.shape() != (noise.samples * nv, n_classes) {
        return Err(Error::DimensionMismatch(format!(
            "noise {:?} for {} samples of {nv}x{n_classes}",
            noise.eps.shape(),
            noise.samples
        )));
    }
    if nv == 0 {
        return Ok(tape.scalar(0.0));
    }
    let rows = noise.samples * nv;
    let var = tape.clamp(var, VAR_FLOOR, f64::INFINITY);
    let sd = tape.sqrt(var);
    let sd = tape.tile_rows(sd, noise.samples);
    let sd = tape.expand(sd, rows, n_classes)?;
    let eps = tape.constant(noise.eps.clone());
    let jitter = tape.mul(sd, eps)?;
    let mu = tape.tile_rows(mean, noise.samples);
    let f = tape.add(mu, jitter)?;
    let onehot = Matrix::from_fn(nv, n_classes, |j, n| if labels[j] == n { 1.0 } else { 0.0 });
    let onehot = tape.constant(onehot);
    let onehot = tape.tile_rows(onehot, noise.samples);
    let picked = tape.mul(f, onehot)?;
    let picked = tape.sum_rows(picked);
    let lse = tape.logsumexp_rows(f);
    let ll = tape.sub(picked, lse)?;
    let total = tape.sum(ll);
    Ok(tape.scale(total, 1.0 / noise.samples as f64))
}

/// GP-VIB classification objective: Monte Carlo softmax log-likelihood of
/// the query labels under `N` per-class marginals, minus `beta * KL`.
pub fn classification_objective(
    model: &GpVib,
    tape: &mut Tape,
    bound: &Bound,
    task: &Task,
    noise: &ClassNoise,
) -> Result<ObjectiveParts> {
    if !matches!(task.kind, TaskKind::Classification { .. }) {
        return Err(Error::Invalid("classification objective on a regression task".into()));
    }
    let enc = encode(model, tape, bound, task)?;
    let data = if task.n_query() == 0 {
        tape.scalar(0.0)
    } else {
        let (mean, var) = enc.gp.moments(tape, enc.u_v)?;
        mc_softmax_term(tape, mean, var, &task.query_labels()?, noise)?
    };
    combine(tape, data, enc.kl, model.cfg.beta)
}

/// Draws the Monte Carlo noise a classification objective needs.
pub fn sample_noise(model: &GpVib, task: &Task, rng: &mut impl Rng) -> Option<ClassNoise> {
    task.n_classes().map(|n| ClassNoise::sample(model.cfg.mc_samples, task.n_query(), n, rng))
}

/// Either objective, dispatching on the task kind.
pub fn objective(
    model: &GpVib,
    tape: &mut Tape,
    bound: &Bound,
    task: &Task,
    noise: Option<&ClassNoise>,
) -> Result<ObjectiveParts> {
    match task.kind {
        TaskKind::Regression => regression_objective(model, tape, bound, task),
        TaskKind::Classification { .. } => {
            let noise = noise.ok_or_else(|| Error::Invalid("classification objective needs MC noise".into()))?;
            classification_objective(model, tape, bound, task, noise)
        }
    }
}

/// Value of the regression objective.
pub fn vib_objective_regression(model: &GpVib, task: &Task, params: &ParamSet) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = params.bind_const(&mut tape);
    let parts = regression_objective(model, &mut tape, &bound, task)?;
    finite(tape.item(parts.value))
}

/// Value of the classification objective with noise drawn from `rng`.
pub fn vib_objective_classification(model: &GpVib, task: &Task, params: &ParamSet, rng: &mut impl Rng) -> Result<f64> {
    let noise = sample_noise(model, task, rng).ok_or_else(|| Error::Invalid("not a classification task".into()))?;
    let mut tape = Tape::new();
    let bound = params.bind_const(&mut tape);
    let parts = classification_objective(model, &mut tape, &bound, task, &noise)?;
    finite(tape.item(parts.value))
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite("objective".into()))
    }
}
