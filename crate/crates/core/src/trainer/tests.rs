use super::*;
use crate::gpvib::{GpVib, Task, TaskKind};
use crate::linalg::Matrix;
use crate::maml::{Maml, MamlConfig};
use crate::tasks::TaskGenSpec;

fn quick(episodes: usize) -> TrainConfig {
    TrainConfig { episodes, eval_every: 10, eval_tasks: 5, seed: 7, ..TrainConfig::regression() }
}

fn small_gpvib() -> Model {
    let mut g = GpVib::sinusoid();
    g.net = crate::features::FeatureNet::new(1, &[8, 8], crate::features::Activation::Relu, false);
    g.cfg = crate::gpvib::VibConfig::regression(8);
    Model::Gpvib(g)
}

#[test]
fn zero_episodes_returns_initialization() {
    let m = small_gpvib();
    let out = meta_train(&m, &TaskGenSpec::sinusoid(5), &quick(0)).unwrap();
    let init = m
        .init_params(&mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(crate::tasks::derive_seed(
            7,
            STREAM_INIT,
            0,
        )))
        .unwrap();
    assert_eq!(out.checkpoint.params, init);
    assert_eq!(out.checkpoint.episode, 0);
    assert_eq!(out.metrics.len(), 1);
    assert!(out.aborted.is_none());
}

#[test]
fn same_seed_same_metrics() {
    for m in [small_gpvib(), Model::Maml(Maml::new(1, &[6], crate::features::Activation::Relu, MamlConfig::default(), true))] {
        let a = meta_train(&m, &TaskGenSpec::sinusoid(5), &quick(20)).unwrap();
        let b = meta_train(&m, &TaskGenSpec::sinusoid(5), &quick(20)).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.objective_trace, b.objective_trace);
        let strip = |rows: &[MetricsRow]| rows.iter().map(|r| (r.episode, r.objective, r.kl_term, r.eval_metric)).collect::<Vec<_>>();
        assert_eq!(strip(&a.metrics), strip(&b.metrics));
        assert_eq!(a.metrics.iter().map(|r| r.episode).collect::<Vec<_>>(), vec![0, 10, 20]);
    }
}

#[test]
fn training_improves_objective() {
    let m = small_gpvib();
    let out = meta_train(&m, &TaskGenSpec::sinusoid(10), &TrainConfig { lr: 3e-3, ..quick(300) }).unwrap();
    let t = &out.objective_trace;
    let head: f64 = t[..50].iter().sum::<f64>() / 50.0;
    let tail: f64 = t[t.len() - 50..].iter().sum::<f64>() / 50.0;
    assert!(tail > head, "{head} -> {tail}");
}

#[test]
fn model_task_mismatch_is_a_config_error() {
    let err = meta_train(&small_gpvib(), &TaskGenSpec::synthetic_classes(3, 1), &quick(1)).unwrap_err();
    assert!(matches!(err, crate::Error::Config { .. }));
}

#[test]
fn non_finite_objective_keeps_last_good_checkpoint() {
    // A huge learning rate drives the noise variance out of range.
    let m = small_gpvib();
    let cfg = TrainConfig { lr: 1e6, ..quick(200) };
    let out = meta_train(&m, &TaskGenSpec::sinusoid(5), &cfg).unwrap();
    if out.aborted.is_some() {
        assert!(out.checkpoint.params.to_flat().iter().all(|v| v.is_finite()));
        assert!(out.checkpoint.episode < 200);
    }
}

#[test]
fn checkpoint_round_trip() {
    let m = small_gpvib();
    let out = meta_train(&m, &TaskGenSpec::sinusoid(5), &quick(2)).unwrap();
    let back = Checkpoint::from_json(&out.checkpoint.to_json().unwrap()).unwrap();
    assert_eq!(back, out.checkpoint);
    let mut v: serde_json::Value = serde_json::from_str(&out.checkpoint.to_json().unwrap()).unwrap();
    v["version"] = serde_json::json!(99);
    assert!(Checkpoint::from_json(&v.to_string()).is_err());
    assert!(Checkpoint::from_json("{").is_err());
}

#[test]
fn ci_formula() {
    assert_eq!(mean_ci(&[3.0]), (3.0, 0.0, 0.0));
    let (m, s, c) = mean_ci(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(m, 2.5);
    let sd = (5.0f64 / 3.0).sqrt();
    assert!((s - sd).abs() < 1e-15);
    assert!((c - 1.96 * sd / 2.0).abs() < 1e-15);
}

/// Every point of every task sits at the same input, so a GP with small
/// noise interpolates the queries.
#[test]
fn perfect_predictor_scores_zero() {
    let gen = TaskGenSpec::Sinusoid {
        amp_range: (1.0, 1.0),
        phase_range: (0.0, 0.0),
        x_range: (0.5, 0.5),
        shots: 3,
        shots_max: None,
        query: 4,
    };
    let mut g = GpVib::sinusoid();
    g.net = crate::features::FeatureNet::new(1, &[2], crate::features::Activation::Relu, false);
    g.cfg = crate::gpvib::VibConfig::regression(2);
    g.cfg.log_noise = 1e-12f64.ln();
    let model = Model::Gpvib(g);
    let mut params = model.init_params(&mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1)).unwrap();
    for p in params.iter_mut() {
        if p.name.starts_with("net.w") {
            p.value = Matrix::filled(p.value.rows(), p.value.cols(), 1.0);
        }
    }
    let ck = Checkpoint::new(model, params, gen.clone(), 0, 0);
    let rep = evaluate(&ck, &gen, &[3], 5, None, 3).unwrap();
    let r = rep.get(3).unwrap();
    assert!(r.mean < 1e-20, "{r:?}");
    assert_eq!(r.metric, "mse");
}

#[test]
fn chance_level_classifier() {
    // Zero features: every class mean is 0, argmax picks class 0, which is
    // right for exactly 1/N of the balanced query set.
    let gen = TaskGenSpec::synthetic_classes(4, 2);
    let mut g = GpVib::classifier(16, 4);
    g.net = crate::features::FeatureNet::new(16, &[3], crate::features::Activation::Relu, false);
    let model = Model::Gpvib(g);
    let mut params = model.init_params(&mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1)).unwrap();
    for p in params.iter_mut() {
        if p.name.starts_with("net.") {
            p.value = Matrix::zeros(p.value.rows(), p.value.cols());
        }
    }
    let ck = Checkpoint::new(model, params, gen.clone(), 0, 0);
    let rep = evaluate(&ck, &gen, &[2], 10, None, 0).unwrap();
    let r = rep.get(2).unwrap();
    assert_eq!(r.metric, "accuracy");
    assert!((r.mean - 0.25).abs() < 1e-12);
    assert_eq!(r.ci95, 0.0);
}

#[test]
fn maml_eval_reports_steps() {
    let m = Model::Maml(Maml::new(1, &[4], crate::features::Activation::Tanh, MamlConfig::default(), false));
    let params = m.init_params(&mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(2)).unwrap();
    let gen = TaskGenSpec::sinusoid(5);
    let ck = Checkpoint::new(m, params, gen.clone(), 0, 0);
    assert_eq!(evaluate(&ck, &gen, &[5], 2, None, 0).unwrap().inner_steps, Some(10));
    assert_eq!(evaluate(&ck, &gen, &[5], 2, Some(1), 0).unwrap().inner_steps, Some(1));
    assert!(evaluate(&ck, &gen, &[5], 0, None, 0).is_err());
}

#[test]
fn task_metric_needs_query_points() {
    let m = small_gpvib();
    let p = m.init_params(&mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(2)).unwrap();
    let t = Task::new(Matrix::column(&[0.0]), vec![1.0], Matrix::zeros(0, 1), vec![], TaskKind::Regression).unwrap();
    assert!(m.task_metric(&p, &t, None).is_err());
}

#[test]
fn nine_significant_digits() {
    assert_eq!(fmt9(0.0), "0");
    assert_eq!(fmt9(1.0), "1");
    assert_eq!(fmt9(0.1 + 0.2), "0.3");
    assert_eq!(fmt9(123456789.4), "123456789");
    assert_eq!(fmt9(-2.0 / 3.0), "-0.666666667");
    assert_eq!(fmt9(1.5e-7), "1.5e-7");
    assert_eq!(fmt9(6.02214076e23), "6.02214076e23");
    assert_eq!(fmt9(1e-5), "0.00001");
}
