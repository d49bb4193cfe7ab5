mod common;

use common::*;
use ibmeta::autodiff::{gradient, Tape};
use ibmeta::features::{class_mean_vectors, head_m, head_s, Activation, EncoderHeads, FeatureNet, S_MAX, S_MIN};
use ibmeta::gpvib::{
    amortized_encoder, exact_posterior, regression_objective, sample_noise, vib_objective_regression, EncoderKind, SolvePath,
    Task,
};
use ibmeta::kernels::{feature_matrix, gram, KernelSpec};
use ibmeta::linalg::{cholesky, kl_gaussian, mvn_logpdf, woodbury_logpdf, woodbury_posterior, GaussianNd, Matrix};
use ibmeta::tasks::{format_tasks, parse_tasks, sample_task, TaskGenSpec};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn random_spd(r: &mut impl Rng, n: usize) -> Matrix {
    let b = Matrix::from_fn(n, n, |_, _| r.random_range(-1.0..1.0));
    b.matmul_t(&b).unwrap().add_diag(r.random_range(1e-3..1.0)).symmetrize()
}

fn random_gaussian(r: &mut impl Rng, n: usize) -> GaussianNd {
    let mean = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
    GaussianNd::new(mean, random_spd(r, n)).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cholesky_reconstructs(seed in any::<u64>(), n in 1usize..=64) {
        let mut r = rng(seed);
        let a = random_spd(&mut r, n);
        let l = cholesky(&a, 0.0).unwrap();
        let err = l.reconstruct().sub(&a.add_diag(l.jitter())).unwrap().frobenius_norm();
        prop_assert!(err <= 1e-8 * a.frobenius_norm());
    }

    #[test]
    fn kl_is_non_negative(seed in any::<u64>(), n in 1usize..8) {
        let mut r = rng(seed);
        let q = random_gaussian(&mut r, n);
        let p = random_gaussian(&mut r, n);
        prop_assert!(kl_gaussian(&q, &p).unwrap() >= -1e-12);
        prop_assert!(kl_gaussian(&q, &q).unwrap().abs() <= 1e-10);
    }

    #[test]
    fn woodbury_matches_dense(seed in any::<u64>(), n in 1usize..=64, m in 1usize..=16) {
        let mut r = rng(seed);
        let phi = Matrix::from_fn(n, m, |_, _| r.random_range(-1.0..1.0));
        let s: Vec<f64> = (0..n).map(|_| r.random_range(0.05..2.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
        let c = r.random_range(0.1..3.0);
        let mut k = phi.matmul_t(&phi).unwrap().scale(c);
        for i in 0..n { k[(i, i)] += s[i]; }
        let g = GaussianNd::new(vec![0.0; n], k.symmetrize()).unwrap();
        let dense = mvn_logpdf(&y, &g).unwrap();
        prop_assert!(rel(woodbury_logpdf(&phi, &s, &y, c).unwrap(), dense) <= 1e-8);

        let star: Vec<f64> = (0..m).map(|_| r.random_range(-1.0..1.0)).collect();
        let (wm, wv) = woodbury_posterior(&phi, &s, &y, c, &star).unwrap();
        let kx: Vec<f64> = (0..n).map(|j| c * ibmeta::linalg::dot(phi.row_slice(j), &star)).collect();
        let kinv = spd_inverse(g.cov());
        let a = kinv.matmul(&Matrix::column(&kx)).unwrap();
        let mean: f64 = (0..n).map(|j| a[(j, 0)] * y[j]).sum();
        let var = c * ibmeta::linalg::dot(&star, &star) - (0..n).map(|j| a[(j, 0)] * kx[j]).sum::<f64>();
        prop_assert!(rel(wm, mean) <= 1e-8, "{} {}", wm, mean);
        prop_assert!((wv - var).abs() <= 1e-8 * (c * ibmeta::linalg::dot(&star, &star)).max(1.0), "{} {}", wv, var);
    }

    #[test]
    fn head_m_is_odd_and_head_s_is_bounded(seed in any::<u64>(), blow_up in 0.0f64..8.0) {
        let mut r = rng(seed);
        let net = FeatureNet::new(2, &[5], Activation::Tanh, true);
        for heads in [EncoderHeads::Amortized, EncoderHeads::Simplified] {
            let mut p = ibmeta::autodiff::ParamSet::new();
            net.init(&mut p, &mut r).unwrap();
            heads.init(net.feature_dim(), &mut p, &mut r).unwrap();
            let scale = 10f64.powf(blow_up);
            let flat: Vec<f64> = p.to_flat().iter().map(|v| v * scale + r.random_range(-1.0..1.0)).collect();
            p.set_flat(&flat).unwrap();
            let x = [r.random_range(-5.0..5.0), r.random_range(-5.0..5.0)];
            let plus = head_m(&x, 1.0, heads, &net, &p).unwrap();
            let minus = head_m(&x, -1.0, heads, &net, &p).unwrap();
            prop_assert_eq!(plus + minus, 0.0);
            let s = head_s(&x, heads, &net, &p).unwrap();
            prop_assert!((S_MIN..=S_MAX).contains(&s), "{}", s);
        }
    }

    #[test]
    fn class_means_are_equivariant(seed in any::<u64>(), n_classes in 1usize..6, shots in 1usize..4) {
        let mut r = rng(seed);
        let labels: Vec<usize> = (0..n_classes * shots).map(|j| j % n_classes).collect();
        let m: Vec<f64> = labels.iter().map(|_| r.random_range(0.0..3.0)).collect();
        let mut perm: Vec<usize> = (0..n_classes).collect();
        perm.shuffle(&mut r);
        let base = class_mean_vectors(&labels, &m, n_classes).unwrap();
        let moved_labels: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
        let moved = class_mean_vectors(&moved_labels, &m, n_classes).unwrap();
        if n_classes > 1 {
            for n in 0..n_classes {
                prop_assert_eq!(&moved[perm[n]], &base[n]);
            }
        }
    }

    #[test]
    fn gram_symmetric_and_factorable(seed in any::<u64>(), n in 1usize..20, cosine in any::<bool>()) {
        let mut r = rng(seed);
        let net = FeatureNet::new(3, &[6, 4], Activation::Tanh, false);
        let spec = if cosine { KernelSpec::cosine() } else { KernelSpec { v: r.random_range(-1.0..1.0), ..KernelSpec::linear() } };
        let mut p = ibmeta::autodiff::ParamSet::new();
        net.init(&mut p, &mut r).unwrap();
        spec.init(&mut p).unwrap();
        let x = Matrix::from_fn(n, 3, |_, _| r.random_range(-2.0..2.0));
        let k = gram(&x, &spec, &net, &p).unwrap();
        prop_assert_eq!(k.asymmetry(), 0.0);
        prop_assert!(cholesky(&k, 1e-10).is_ok());
        if !cosine {
            let phi = feature_matrix(&x, &net, &p).unwrap();
            let want = phi.matmul_t(&phi).unwrap().scale(spec.v.exp() / 4.0);
            prop_assert!(k.sub(&want).unwrap().max_abs() <= 1e-12 * want.max_abs().max(1.0));
        }
    }

    #[test]
    fn amortized_with_pinned_noise_is_exact_posterior(seed in any::<u64>()) {
        let (m, mut p, task) = regression_instance(seed, EncoderKind::Amortized, KernelSpec::linear());
        let sigma2 = m.noise_var(&p);
        pin_head_s(&mut p, sigma2);
        let q = amortized_encoder(&task, &m, &p).unwrap().remove(0);
        let e = exact_posterior(&task, &m, &p).unwrap();
        for (a, b) in q.mean().iter().zip(e.mean()) {
            prop_assert!((a - b).abs() <= 1e-10, "{} {}", a, b);
        }
        prop_assert!(q.cov().sub(e.cov()).unwrap().max_abs() <= 1e-10);
    }

    #[test]
    fn woodbury_path_matches_direct(seed in any::<u64>(), cosine in any::<bool>()) {
        let kernel = if cosine { KernelSpec::cosine() } else { KernelSpec::linear() };
        let (mut m, p, task) = regression_instance(seed, EncoderKind::Amortized, kernel);
        let direct = vib_objective_regression(&m, &task, &p).unwrap();
        let fd = m.fit(&p, &task.x_support, &task.y_support).unwrap();
        m.cfg.path = SolvePath::Woodbury;
        let wood = vib_objective_regression(&m, &task, &p).unwrap();
        let fw = m.fit(&p, &task.x_support, &task.y_support).unwrap();
        prop_assert!(rel(direct, wood) <= 1e-8, "{} {}", direct, wood);
        for j in 0..task.n_query() {
            let a = m.predict_regression(&fd, &p, task.x_query.row_slice(j)).unwrap();
            let b = m.predict_regression(&fw, &p, task.x_query.row_slice(j)).unwrap();
            prop_assert!(rel(a.mean, b.mean) <= 1e-8 && rel(a.var, b.var) <= 1e-8);
        }
    }

    #[test]
    fn stream_matches_batch_in_any_order(seed in any::<u64>()) {
        let (m, p, task) = regression_instance(seed, EncoderKind::Exact, KernelSpec::linear());
        let fitted = m.fit(&p, &task.x_support, &task.y_support).unwrap();
        let mut order: Vec<usize> = (0..task.n_support()).collect();
        order.shuffle(&mut rng(seed ^ 1));
        let mut st = m.stream_state().unwrap();
        for &j in &order {
            m.stream_ingest(&mut st, &p, task.x_support.row_slice(j), task.y_support[j]).unwrap();
        }
        for j in 0..task.n_query() {
            let x = task.x_query.row_slice(j);
            let (bm, bv) = m.marginal_q(&fitted, &p, x).unwrap();
            let (sm, sv) = m.stream_predict(&st, &p, x).unwrap();
            prop_assert!(rel(bm[0], sm[0]) <= 1e-8 && rel(bv, sv) <= 1e-8);
        }
    }

    #[test]
    fn backward_is_deterministic(seed in any::<u64>()) {
        let (m, p, task) = classification_instance(seed, EncoderKind::Amortized, 5);
        let noise = sample_noise(&m, &task, &mut rng(seed)).unwrap();
        let run = || {
            let mut t = Tape::new();
            let b = p.bind(&mut t);
            let v = ibmeta::gpvib::objective(&m, &mut t, &b, &task, Some(&noise)).unwrap().value;
            gradient(&mut t, v, &b).unwrap()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn task_draws_are_pure_and_round_trip(seed in any::<u64>(), shots in 1usize..6, ways in 2usize..5) {
        for spec in [TaskGenSpec::sinusoid(shots), TaskGenSpec::synthetic_classes(ways, shots)] {
            let a = sample_task(&spec, seed).unwrap();
            prop_assert_eq!(&a, &sample_task(&spec, seed).unwrap());
            let back: Vec<Task> = parse_tasks(&format_tasks(std::slice::from_ref(&a))).unwrap();
            prop_assert_eq!(back, vec![a]);
        }
    }
}

#[test]
fn objective_matches_explicit_form_with_zero_beta_data_term() {
    for seed in 0..30 {
        let (mut m, p, task) = regression_instance(seed, EncoderKind::Exact, KernelSpec::linear());
        m.cfg.beta = 0.0;
        let mut t = Tape::new();
        let b = p.bind_const(&mut t);
        let parts = regression_objective(&m, &mut t, &b, &task).unwrap();
        assert_eq!(t.item(parts.value), t.item(parts.data));
    }
}
