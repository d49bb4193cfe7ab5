use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{check_gradient, ParamSet, Tape};
use crate::features::{Activation, FeatureNet, ENC_A, ENC_M_TILDE};
use crate::kernels::{kernel, KernelSpec};
use crate::linalg::{kl_gaussian, normal_logpdf, GaussianNd, Matrix};

fn set(p: &mut ParamSet, name: &str, v: f64) {
    p.get_mut(name).unwrap()[(0, 0)] = v;
}

/// `phi(x) = x`, `k(x, x') = c x x'`, `sigma^2 = exp(log_noise)`.
fn line_model(c: f64, log_noise: f64) -> (GpVib, ParamSet) {
    let net = FeatureNet::new(1, &[], Activation::Relu, false);
    let mut cfg = VibConfig::regression(1);
    cfg.kernel = KernelSpec { fixed_variance: Some(c), ..KernelSpec::linear() };
    cfg.log_noise = log_noise;
    let m = GpVib::new(net, cfg, TaskKind::Regression).unwrap();
    let p = m.init_params(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    (m, p)
}

fn random_regression(seed: u64, encoder: EncoderKind, kernel: KernelSpec) -> (GpVib, ParamSet, Task) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = FeatureNet::new(2, &[7, 6], Activation::Tanh, false);
    let mut cfg = VibConfig::regression(6);
    cfg.kernel = kernel;
    cfg.encoder = encoder;
    cfg.log_noise = rng.random_range(-3.0..0.0);
    cfg.beta = rng.random_range(0.2..2.0);
    let m = GpVib::new(net, cfg, TaskKind::Regression).unwrap();
    let p = m.init_params(&mut rng).unwrap();
    let nt = rng.random_range(1..6);
    let nv = rng.random_range(1..6);
    let xs = Matrix::from_fn(nt, 2, |_, _| rng.random_range(-2.0..2.0));
    let xq = Matrix::from_fn(nv, 2, |_, _| rng.random_range(-2.0..2.0));
    let ys = (0..nt).map(|_| rng.random_range(-2.0..2.0)).collect();
    let yq = (0..nv).map(|_| rng.random_range(-2.0..2.0)).collect();
    (m, p, Task::new(xs, ys, xq, yq, TaskKind::Regression).unwrap())
}

fn random_classification(seed: u64, n_classes: usize, encoder: EncoderKind) -> (GpVib, ParamSet, Task) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = FeatureNet::new(3, &[6], Activation::Tanh, true);
    let mut cfg = VibConfig::classification();
    cfg.encoder = encoder;
    cfg.mc_samples = 7;
    cfg.beta = 0.3;
    let kind = TaskKind::Classification { n_classes };
    let m = GpVib::new(net, cfg, kind).unwrap();
    let p = m.init_params(&mut rng).unwrap();
    let nt = 2 * n_classes;
    let nv = 3;
    let xs = Matrix::from_fn(nt, 3, |_, _| rng.random_range(-2.0..2.0));
    let xq = Matrix::from_fn(nv, 3, |_, _| rng.random_range(-2.0..2.0));
    let ys = (0..nt).map(|j| (j % n_classes) as f64).collect();
    let yq = (0..nv).map(|_| rng.random_range(0..n_classes) as f64).collect();
    (m, p, Task::new(xs, ys, xq, yq, kind).unwrap())
}

fn one_point(ys: f64, xq: f64, yq: f64) -> Task {
    Task::new(Matrix::scalar(1.0), vec![ys], Matrix::scalar(xq), vec![yq], TaskKind::Regression).unwrap()
}

#[test]
fn exact_posterior_one_point() {
    let (m, p) = line_model(1.0, 0.0);
    let g = exact_posterior(&one_point(2.0, 1.0, 0.0), &m, &p).unwrap();
    assert!((g.mean()[0] - 1.0).abs() < 1e-15);
    assert!((g.cov()[(0, 0)] - 0.5).abs() < 1e-15);
}

#[test]
fn exact_posterior_recovers_prior_for_huge_noise() {
    let (m, p) = line_model(1.0, 1e8f64.ln());
    let x = Matrix::from_rows(&[&[1.0], &[0.5]]);
    let t = Task::new(x.clone(), vec![1.0, -2.0], x, vec![0.0, 0.0], TaskKind::Regression).unwrap();
    let g = exact_posterior(&t, &m, &p).unwrap();
    assert!(g.mean().iter().all(|v| v.abs() < 1e-7));
    let k = Matrix::from_rows(&[&[1.0, 0.5], &[0.5, 0.25]]);
    assert!(g.cov().sub(&k).unwrap().max_abs() < 1e-7);
}

#[test]
fn amortized_with_noise_level_matches_exact() {
    for seed in 0..20 {
        let (mut m, mut p, task) = random_regression(seed, EncoderKind::Simplified, KernelSpec::linear());
        // softplus(a) = sigma^2 makes S = sigma^2 I with m = y.
        let sigma2 = m.noise_var(&p);
        set(&mut p, ENC_A, (sigma2.exp() - 1.0).ln());
        let amortized = amortized_encoder(&task, &m, &p).unwrap().remove(0);
        m.cfg.encoder = EncoderKind::Exact;
        let exact = exact_posterior(&task, &m, &p).unwrap();
        for (a, b) in amortized.mean().iter().zip(exact.mean()) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(amortized.cov().sub(exact.cov()).unwrap().max_abs() < 1e-10);
    }
}

#[test]
fn zero_targets_give_zero_mean() {
    let k = Matrix::from_rows(&[&[2.0, 0.5], &[0.5, 1.0]]);
    let g = gaussian_encoder(&k, &[0.3, 0.7], &[0.0, 0.0]).unwrap();
    assert_eq!(g.mean(), &[0.0, 0.0]);
    let g2 = gaussian_encoder(&k, &[0.3, 0.7], &[1.0, -1.0]).unwrap();
    assert_eq!(g.cov(), g2.cov());
}

#[test]
fn binary_classes_share_covariance() {
    let (m, p, task) = random_classification(3, 2, EncoderKind::Amortized);
    let enc = amortized_encoder(&task, &m, &p).unwrap();
    assert_eq!(enc.len(), 2);
    assert_eq!(enc[0].cov(), enc[1].cov());
    for (a, b) in enc[0].mean().iter().zip(enc[1].mean()) {
        assert!((a + b).abs() < 1e-12);
    }
}

#[test]
fn marginal_at_support_point_is_joint_marginal() {
    for seed in 0..10 {
        let (m, p, task) = random_regression(seed, EncoderKind::Amortized, KernelSpec::linear());
        let joint = amortized_encoder(&task, &m, &p).unwrap().remove(0);
        let fitted = m.fit(&p, &task.x_support, &task.y_support).unwrap();
        for j in 0..task.n_support() {
            let (mean, var) = m.marginal_q(&fitted, &p, task.x_support.row_slice(j)).unwrap();
            assert!((mean[0] - joint.mean()[j]).abs() < 1e-10);
            assert!((var - joint.cov()[(j, j)]).abs() < 1e-10);
        }
    }
}

#[test]
fn orthogonal_query_sees_the_prior() {
    let net = FeatureNet::new(2, &[], Activation::Relu, false);
    let mut cfg = VibConfig::regression(2);
    cfg.kernel = KernelSpec::linear();
    let m = GpVib::new(net, cfg, TaskKind::Regression).unwrap();
    let p = m.init_params(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let fitted = m.fit(&p, &Matrix::from_rows(&[&[1.0, 0.0]]), &[3.0]).unwrap();
    let (mean, var) = m.marginal_q(&fitted, &p, &[0.0, 2.0]).unwrap();
    assert_eq!(mean[0], 0.0);
    let k = kernel(&[0.0, 2.0], &[0.0, 2.0], &m.cfg.kernel, &m.net, &p).unwrap();
    assert!((var - k).abs() < 1e-15);
}

#[test]
fn regression_objective_two_point_closed_form() {
    let (mut m, p) = line_model(1.0, 0.0);
    let task = one_point(2.0, 1.0, 1.0);
    // q(f) = N(1, 0.5); data = log N(1 | 1, 1) - 0.5/2; KL[N(1, .5) || N(0, 1)].
    let data = normal_logpdf(1.0, 1.0, 1.0) - 0.25;
    let kl = 0.5 * (0.5 + 1.0 - 1.0 - 0.5f64.ln());
    m.cfg.beta = 1.0;
    let v = vib_objective_regression(&m, &task, &p).unwrap();
    assert!((v - (data - kl)).abs() < 1e-14, "{v}");
    m.cfg.beta = 0.0;
    let mut t = Tape::new();
    let b = p.bind_const(&mut t);
    let parts = regression_objective(&m, &mut t, &b, &task).unwrap();
    assert_eq!(t.item(parts.value), t.item(parts.data));
    assert!((t.item(parts.value) - data).abs() < 1e-15);
}

#[test]
fn beta_zero_is_expected_query_loglik() {
    for seed in 0..10 {
        let (mut m, p, task) = random_regression(seed, EncoderKind::Exact, KernelSpec::linear());
        m.cfg.beta = 0.0;
        let fitted = m.fit(&p, &task.x_support, &task.y_support).unwrap();
        let s2 = m.noise_var(&p);
        let mut expect = 0.0;
        for j in 0..task.n_query() {
            let pr = m.predict_regression(&fitted, &p, task.x_query.row_slice(j)).unwrap();
            expect += normal_logpdf(task.y_query[j], pr.mean, s2) - pr.var / (2.0 * s2);
        }
        let v = vib_objective_regression(&m, &task, &p).unwrap();
        assert!((v - expect).abs() < 1e-10 * expect.abs().max(1.0));
    }
}

#[test]
fn convenient_form_matches_explicit_kl() {
    for seed in 0..20 {
        let (m, p, task) = random_regression(seed, EncoderKind::Amortized, KernelSpec::linear());
        let mut tape = Tape::new();
        let b = p.bind_const(&mut tape);
        let parts = regression_objective(&m, &mut tape, &b, &task).unwrap();
        let q = amortized_encoder(&task, &m, &p).unwrap().remove(0);
        let k = crate::kernels::gram(&task.x_support, &m.cfg.kernel, &m.net, &p).unwrap();
        let prior = GaussianNd::new(vec![0.0; task.n_support()], k).unwrap();
        let kl = kl_gaussian(&q, &prior).unwrap();
        let got = tape.item(parts.kl);
        assert!((got - kl).abs() < 1e-8 * kl.abs().max(1.0), "{got} vs {kl}");
    }
}

#[test]
fn woodbury_objective_matches_direct() {
    for seed in 0..20 {
        for kernel in [KernelSpec::linear(), KernelSpec::cosine()] {
            let (mut m, p, task) = random_regression(seed, EncoderKind::Amortized, kernel);
            let direct = vib_objective_regression(&m, &task, &p).unwrap();
            m.cfg.path = SolvePath::Woodbury;
            let wood = vib_objective_regression(&m, &task, &p).unwrap();
            assert!((direct - wood).abs() < 1e-8 * direct.abs().max(1.0), "{direct} vs {wood}");
        }
    }
}

#[test]
fn regression_gradients_match_finite_differences() {
    for seed in 0..5 {
        for (enc, path) in [
            (EncoderKind::Exact, SolvePath::Direct),
            (EncoderKind::Amortized, SolvePath::Woodbury),
            (EncoderKind::Simplified, SolvePath::Direct),
        ] {
            let (mut m, p, task) = random_regression(seed, enc, KernelSpec::linear());
            m.cfg.path = path;
            let r = check_gradient(|t, b| Ok(regression_objective(&m, t, b, &task)?.value), &p, 1e-5).unwrap();
            assert!(r.max_rel_error < 1e-4, "{enc:?} {path:?} seed {seed}: {r:?}");
        }
    }
}

#[test]
fn classification_gradients_with_frozen_noise() {
    for seed in 0..5 {
        let (m, p, task) = random_classification(seed, 3, EncoderKind::Amortized);
        let noise = sample_noise(&m, &task, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let r = check_gradient(|t, b| Ok(classification_objective(&m, t, b, &task, &noise)?.value), &p, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "seed {seed}: {r:?}");
    }
}

#[test]
fn single_class_softmax_term_is_zero() {
    let (m, p, task) = random_classification(1, 1, EncoderKind::Simplified);
    let noise = sample_noise(&m, &task, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut t = Tape::new();
    let b = p.bind_const(&mut t);
    let parts = classification_objective(&m, &mut t, &b, &task, &noise).unwrap();
    assert_eq!(t.item(parts.data), 0.0);
}

#[test]
fn equal_means_give_uniform_softmax() {
    let mut t = Tape::new();
    let mean = t.constant(Matrix::filled(4, 5, 0.7));
    let var = t.constant(Matrix::zeros(4, 1));
    let noise = ClassNoise::sample(10, 4, 5, &mut ChaCha8Rng::seed_from_u64(2));
    let v = mc_softmax_term(&mut t, mean, var, &[0, 1, 2, 4], &noise).unwrap();
    assert!((t.item(v) - 4.0 * (0.2f64).ln()).abs() < 1e-7);
}

#[test]
fn classification_invariant_under_relabeling() {
    let perm = [2, 0, 3, 1];
    for seed in 0..5 {
        let (m, p, task) = random_classification(seed, 4, EncoderKind::Amortized);
        let noise = sample_noise(&m, &task, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let relabel = |y: &[f64]| -> Vec<f64> { y.iter().map(|&l| perm[l as usize] as f64).collect() };
        let moved = Task::new(
            task.x_support.clone(),
            relabel(&task.y_support),
            task.x_query.clone(),
            relabel(&task.y_query),
            task.kind,
        )
        .unwrap();
        let eval = |t: &Task, n: &ClassNoise| {
            let mut tape = Tape::new();
            let b = p.bind_const(&mut tape);
            let parts = classification_objective(&m, &mut tape, &b, t, n).unwrap();
            tape.item(parts.value)
        };
        assert_eq!(eval(&task, &noise), eval(&moved, &noise.permute_classes(&perm)));
    }
}

#[test]
fn regression_prediction_adds_noise() {
    let (m, p) = line_model(1.0, 0.0);
    let fitted = m.fit(&p, &Matrix::scalar(1.0), &[2.0]).unwrap();
    let pr = m.predict_regression(&fitted, &p, &[1.0]).unwrap();
    assert!((pr.mean - 1.0).abs() < 1e-15);
    assert!((pr.var - 0.5).abs() < 1e-15);
    assert!((pr.predictive_var - 1.5).abs() < 1e-15);
}

#[test]
fn mirrored_binary_support_is_even() {
    let net = FeatureNet::new(1, &[], Activation::Relu, true);
    let cfg = VibConfig::classification();
    let kind = TaskKind::Classification { n_classes: 2 };
    let m = GpVib::new(net, cfg, kind).unwrap();
    let mut p = m.init_params(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    set(&mut p, ENC_M_TILDE, 1.0);
    // phi = (x, 1); x = 0 is equidistant from the mirrored supports.
    let xs = Matrix::from_rows(&[&[1.0], &[-1.0]]);
    let fitted = m.fit(&p, &xs, &[0.0, 1.0]).unwrap();
    let pred = m.predict_class(&fitted, &p, &[0.0], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let tol = 3.0 / 200f64.sqrt();
    assert!((pred.probs[0] - 0.5).abs() < tol && (pred.probs[1] - 0.5).abs() < tol, "{pred:?}");
    assert!((pred.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(pred.label, 0);
}

#[test]
fn argmax_ties_take_lowest_index() {
    assert_eq!(argmax_of_means(&[1.0, 3.0, 3.0]), 1);
    assert_eq!(argmax_of_means(&[0.0, 0.0]), 0);
}

#[test]
fn argmax_agrees_with_probabilities_when_gap_is_large() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let means: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let var = rng.random_range(0.1..2.0);
        let eps = Matrix::from_fn(100_000, 4, |_, _| rng.sample(rand_distr::StandardNormal));
        let probs = class_probabilities(&means, var, &eps).unwrap();
        let best = argmax_of_means(&means);
        let by_prob = argmax_of_means(&probs);
        let mut sorted = probs.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        // 5 standard errors of a probability estimate at 1e5 draws.
        if sorted[0] - sorted[1] > 5.0 * 0.5 / (1e5f64).sqrt() {
            assert_eq!(best, by_prob, "{means:?} {probs:?}");
        }
    }
}

#[test]
fn stream_empty_and_one_point() {
    let (m, p) = line_model(1.0, 0.0);
    let mut st = m.stream_state().unwrap();
    let (mean, var) = m.stream_predict(&st, &p, &[2.0]).unwrap();
    assert_eq!(mean[0], 0.0);
    assert!((var - 4.0).abs() < 1e-15);
    m.stream_ingest(&mut st, &p, &[1.0], 2.0).unwrap();
    let (mean, var) = m.stream_predict(&st, &p, &[1.0]).unwrap();
    assert!((mean[0] - 1.0).abs() < 1e-15);
    assert!((var - 0.5).abs() < 1e-15);
}

#[test]
fn stream_matches_batch_in_any_order() {
    for seed in 0..10 {
        let (m, p, task) = random_classification(seed, 3, EncoderKind::Amortized);
        let fitted = m.fit(&p, &task.x_support, &task.y_support).unwrap();
        let mut order: Vec<usize> = (0..task.n_support()).collect();
        order.reverse();
        order.swap(0, 2);
        let mut st = m.stream_state().unwrap();
        for &j in &order {
            m.stream_ingest(&mut st, &p, task.x_support.row_slice(j), task.y_support[j]).unwrap();
        }
        for j in 0..task.n_query() {
            let x = task.x_query.row_slice(j);
            let (bm, bv) = m.marginal_q(&fitted, &p, x).unwrap();
            let (sm, sv) = m.stream_predict(&st, &p, x).unwrap();
            for (a, b) in bm.iter().zip(&sm) {
                assert!((a - b).abs() < 1e-8 * a.abs().max(1.0));
            }
            assert!((bv - sv).abs() < 1e-8 * bv.abs().max(1.0));
        }
    }
}

#[test]
fn cosine_rejects_streaming() {
    let (m, _, _) = random_regression(0, EncoderKind::Exact, KernelSpec::cosine());
    assert_eq!(m.stream_state(), Err(crate::Error::StreamRequiresLinearKernel));
}

#[test]
fn elbo_bound_holds_and_is_tight_for_the_joint_posterior() {
    for seed in 0..20 {
        let (m, p, task) = random_regression(seed, EncoderKind::Amortized, KernelSpec::linear());
        let (vib, marginal) = elbo_bound_check(&task, &m, &p).unwrap();
        assert!(vib <= marginal + 1e-8, "{vib} > {marginal}");
    }
    let (mut m, p, task) = random_regression(4, EncoderKind::Exact, KernelSpec::linear());
    m.cfg.encoder = EncoderKind::Exact;
    let joint = Task::new(task.x_query.clone(), task.y_query.clone(), task.x_query.clone(), task.y_query.clone(), task.kind)
        .unwrap();
    let (vib, marginal) = elbo_bound_check(&joint, &m, &p).unwrap();
    assert!(marginal - vib >= -1e-8 && marginal - vib < 1e-8, "{vib} {marginal}");
    let empty = task.clone();
    let empty = Task::new(empty.x_support, empty.y_support, Matrix::zeros(0, 2), vec![], empty.kind).unwrap();
    assert_eq!(elbo_bound_check(&empty, &m, &p).unwrap(), (0.0, 0.0));
}
