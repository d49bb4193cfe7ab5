#![allow(dead_code)]

use ibmeta::autodiff::ParamSet;
use ibmeta::features::{Activation, FeatureNet, HEAD_S_B, HEAD_S_W};
use ibmeta::gpvib::{EncoderKind, GpVib, Task, TaskKind, VibConfig};
use ibmeta::kernels::{gram, KernelSpec};
use ibmeta::linalg::{cholesky, normal_logpdf, solve_triangular, Matrix, Side};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random regression model and task. Support size stays at or below the
/// feature dimension and supports whose Gram has condition number above
/// `MAX_COND` are redrawn, so the dense-inverse oracles keep their accuracy.
pub fn regression_instance(seed: u64, encoder: EncoderKind, kernel: KernelSpec) -> (GpVib, ParamSet, Task) {
    let mut r = rng(seed);
    loop {
        let m_dim = r.random_range(2..9);
        let d = r.random_range(1..4);
        let net = FeatureNet::new(d, &[r.random_range(3..9), m_dim], Activation::Tanh, false);
        let mut cfg = VibConfig::regression(m_dim);
        cfg.kernel = kernel.clone();
        cfg.encoder = encoder;
        cfg.log_noise = r.random_range(-4.0..0.5);
        cfg.beta = r.random_range(0.0..2.0);
        let model = GpVib::new(net, cfg, TaskKind::Regression).unwrap();
        let params = model.init_params(&mut r).unwrap();
        let nt = r.random_range(1..=m_dim);
        let nv = r.random_range(1..8);
        let xs = Matrix::from_fn(nt, d, |_, _| r.random_range(-2.0..2.0));
        let xq = Matrix::from_fn(nv, d, |_, _| r.random_range(-2.0..2.0));
        let ys = (0..nt).map(|_| r.random_range(-3.0..3.0)).collect();
        let yq = (0..nv).map(|_| r.random_range(-3.0..3.0)).collect();
        let k = gram(&xs, &model.cfg.kernel, &model.net, &params).unwrap();
        if condition_number(&k) <= MAX_COND {
            return (model, params, Task::new(xs, ys, xq, yq, TaskKind::Regression).unwrap());
        }
    }
}

pub const MAX_COND: f64 = 1e6;

/// Condition number of a symmetric PD matrix from the Cholesky pivots
/// (a lower bound on the 2-norm condition that is tight enough to screen).
pub fn condition_number(a: &Matrix) -> f64 {
    match cholesky(a, 0.0) {
        Ok(l) if l.jitter() == 0.0 => {
            let d = l.matrix().diag();
            let hi = d.iter().copied().fold(0.0, f64::max);
            let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
            (hi / lo).powi(2)
        }
        _ => f64::INFINITY,
    }
}

/// Random classification model and balanced task.
pub fn classification_instance(seed: u64, encoder: EncoderKind, mc: usize) -> (GpVib, ParamSet, Task) {
    let mut r = rng(seed);
    let n_classes = r.random_range(2..6);
    let d = r.random_range(1..4);
    let net = FeatureNet::new(d, &[r.random_range(3..8)], Activation::Tanh, true);
    let mut cfg = VibConfig::classification();
    cfg.encoder = encoder;
    cfg.mc_samples = mc;
    cfg.beta = r.random_range(0.0..1.0);
    let kind = TaskKind::Classification { n_classes };
    let model = GpVib::new(net, cfg, kind).unwrap();
    let params = model.init_params(&mut r).unwrap();
    let shots = r.random_range(1..3);
    let nt = shots * n_classes;
    let nv = r.random_range(1..6);
    let xs = Matrix::from_fn(nt, d, |_, _| r.random_range(-2.0..2.0));
    let xq = Matrix::from_fn(nv, d, |_, _| r.random_range(-2.0..2.0));
    let ys = (0..nt).map(|j| (j % n_classes) as f64).collect();
    let yq = (0..nv).map(|_| r.random_range(0..n_classes) as f64).collect();
    (model, params, Task::new(xs, ys, xq, yq, kind).unwrap())
}

/// Sets the amortized variance head to the constant `sigma^2`.
pub fn pin_head_s(params: &mut ParamSet, sigma2: f64) {
    let w = params.get_mut(HEAD_S_W).unwrap();
    *w = Matrix::zeros(w.rows(), w.cols());
    params.get_mut(HEAD_S_B).unwrap()[(0, 0)] = sigma2.exp_m1().ln();
}

/// Dense inverse of a symmetric positive definite matrix.
pub fn spd_inverse(a: &Matrix) -> Matrix {
    let l = cholesky(a, 0.0).unwrap();
    let li = solve_triangular(&l, &Matrix::identity(a.rows()), Side::Lower).unwrap();
    li.transpose().matmul(&li).unwrap()
}

/// Independent reference for the regression objective: the encoder
/// `N(mu, Sigma)` is formed with dense inverses, pushed through the GP
/// conditional to each query, and combined as
/// `sum_v E_q[log N(y_v | f_v, sigma^2)] - beta * KL[q || p]`.
pub fn explicit_regression_objective(model: &GpVib, params: &ParamSet, task: &Task, m: &[f64], s: &[f64]) -> f64 {
    let k = gram(&task.x_support, &model.cfg.kernel, &model.net, params).unwrap();
    let n = k.rows();
    let mut ks = k.clone();
    for i in 0..n {
        ks[(i, i)] += s[i];
    }
    let ks_inv = spd_inverse(&ks);
    let mu = k.matmul(&ks_inv).unwrap().matmul(&Matrix::column(m)).unwrap();
    let sigma = k.sub(&k.matmul(&ks_inv).unwrap().matmul(&k).unwrap()).unwrap().symmetrize();
    let k_inv = spd_inverse(&k);
    let noise = model.noise_var(params);
    let mut data = 0.0;
    for v in 0..task.n_query() {
        let xv = Matrix::from_vec(1, task.input_dim(), task.x_query.row_slice(v).to_vec()).unwrap();
        let kx = ibmeta::kernels::cross_gram(&task.x_support, &xv, &model.cfg.kernel, &model.net, params).unwrap();
        let kvv = gram(&xv, &model.cfg.kernel, &model.net, params).unwrap()[(0, 0)];
        let a = k_inv.matmul(&kx).unwrap();
        let mean = a.transpose().matmul(&mu).unwrap()[(0, 0)];
        let var = kvv - kx.transpose().matmul(&a).unwrap()[(0, 0)]
            + a.transpose().matmul(&sigma).unwrap().matmul(&a).unwrap()[(0, 0)];
        data += normal_logpdf(task.y_query[v], mean, noise) - 0.5 * var / noise;
    }
    // KL between N(mu, Sigma) and N(0, K), written out.
    let tr = k_inv.matmul(&sigma).unwrap().diag().iter().sum::<f64>();
    let quad = mu.transpose().matmul(&k_inv).unwrap().matmul(&mu).unwrap()[(0, 0)];
    let logdet = |a: &Matrix| cholesky(a, 0.0).unwrap().log_det();
    let kl = 0.5 * (tr + quad - n as f64 + logdet(&k) - logdet(&sigma));
    data - model.cfg.beta * kl
}

/// Worst per-coordinate relative error between the tape gradient of `f`
/// and central differences `(f(x+h) - f(x-h)) / 2h` with `h = 1e-5`.
///
/// The denominator is `max(|analytic|, |numeric|, 1e-6 (1 + |f(x)|))`: the
/// difference quotient carries roundoff of order `1e-13 |f| / h`, so
/// coordinates far below the objective's own scale are compared at that
/// resolution instead of relatively.
pub fn fd_check<F>(f: F, params: &ParamSet) -> f64
where
    F: Fn(&mut ibmeta::autodiff::Tape, &ibmeta::autodiff::Bound) -> ibmeta::Result<ibmeta::autodiff::Var>,
{
    const H: f64 = 1e-5;
    let mut tape = ibmeta::autodiff::Tape::new();
    let bound = params.bind(&mut tape);
    let out = f(&mut tape, &bound).unwrap();
    let value = tape.item(out);
    let analytic = ibmeta::autodiff::gradient(&mut tape, out, &bound).unwrap();
    let floor = 1e-6 * (1.0 + value.abs());
    let base = params.to_flat();
    let mut probe = params.clone();
    let mut eval = |x: &[f64]| -> f64 {
        probe.set_flat(x).unwrap();
        let mut t = ibmeta::autodiff::Tape::new();
        let b = probe.bind_const(&mut t);
        let v = f(&mut t, &b).unwrap();
        t.item(v)
    };
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut x = base.clone();
        x[i] = base[i] + H;
        let up = eval(&x);
        x[i] = base[i] - H;
        let down = eval(&x);
        let numeric = (up - down) / (2.0 * H);
        let a = analytic[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(floor));
    }
    worst
}
