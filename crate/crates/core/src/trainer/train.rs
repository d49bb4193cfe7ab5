use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState, LrMap};
use super::model::{Checkpoint, Model};
use crate::error::{Error, Result};
use crate::gpvib::Task;
use crate::tasks::{derive_seed, sample_task, TaskGenSpec};

/// Seed streams under the run seed.
pub const STREAM_INIT: u64 = 1;
pub const STREAM_TRAIN_TASK: u64 = 2;
pub const STREAM_TRAIN_NOISE: u64 = 3;
pub const STREAM_EVAL_TASK: u64 = 4;
pub const STREAM_TEST_TASK: u64 = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub episodes: usize,
    pub meta_batch: usize,
    pub lr: f64,
    pub out_scale_lr: f64,
    pub seed: u64,
    /// Episodes between evaluations; the first and last are always evaluated.
    pub eval_every: usize,
    /// Held-out tasks per evaluation.
    pub eval_tasks: usize,
    pub checkpoint: Option<PathBuf>,
}

impl TrainConfig {
    pub fn regression() -> Self {
        Self {
            episodes: 20_000,
            meta_batch: 5,
            lr: 1e-3,
            out_scale_lr: 1e-4,
            seed: 0,
            eval_every: 500,
            eval_tasks: 100,
            checkpoint: None,
        }
    }

    pub fn classification() -> Self {
        Self { meta_batch: 4, ..Self::regression() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::Config { key: key.into(), msg: msg.into() });
        if self.meta_batch == 0 {
            return bad("meta_batch", "must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be > 0");
        }
        if !(self.out_scale_lr > 0.0 && self.out_scale_lr.is_finite()) {
            return bad("out_scale_lr", "must be > 0");
        }
        if self.eval_every == 0 {
            return bad("eval_every", "must be >= 1");
        }
        if self.eval_tasks == 0 {
            return bad("eval_tasks", "must be >= 1");
        }
        Ok(())
    }

    pub fn lr_map(&self) -> LrMap {
        LrMap { default: self.lr, out_scale: self.out_scale_lr }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub episode: usize,
    pub objective: f64,
    pub kl_term: f64,
    pub eval_metric: f64,
    pub wallclock_s: f64,
}

pub const METRICS_HEADER: &str = "episode,objective,kl_term,eval_metric,wallclock_s";

pub fn format_metrics(rows: &[MetricsRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.3}\n",
            r.episode,
            fmt9(r.objective),
            fmt9(r.kl_term),
            fmt9(r.eval_metric),
            r.wallclock_s
        ));
    }
    out
}

pub fn write_metrics(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    f.write_all(format_metrics(rows).as_bytes())?;
    Ok(())
}

/// Nine significant digits.
pub fn fmt9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let s = format!("{x:.8e}");
    let (mant, exp) = s.split_once('e').expect("exponent form");
    let e: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&e) {
        let decimals = (8 - e).max(0) as usize;
        let f = format!("{x:.decimals$}");
        if f.contains('.') {
            f.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            f
        }
    } else {
        let mant = mant.trim_end_matches('0').trim_end_matches('.');
        format!("{mant}e{e}")
    }
}

/// Result of a training run. On a numerical abort `checkpoint` holds the
/// last parameters that produced a finite step and `aborted` the cause.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
    /// Meta-batch objective of every episode, before its update.
    pub objective_trace: Vec<f64>,
    pub aborted: Option<Error>,
}

/// Mean metric over the fixed held-out tasks of a run.
fn eval_metric(model: &Model, params: &crate::autodiff::ParamSet, tasks: &[Task]) -> Result<f64> {
    let mut total = 0.0;
    for t in tasks {
        total += model.task_metric(params, t, None)?;
    }
    Ok(total / tasks.len() as f64)
}

/// Held-out tasks used for the metrics log: the generator at its base shot
/// count.
pub fn eval_tasks(gen: &TaskGenSpec, cfg: &TrainConfig) -> Result<Vec<Task>> {
    let fixed = gen.shots().map_or_else(|| gen.clone(), |k| gen.with_shots(k));
    (0..cfg.eval_tasks as u64).map(|i| sample_task(&fixed, derive_seed(cfg.seed, STREAM_EVAL_TASK, i))).collect()
}

fn check_kinds(model: &Model, gen: &TaskGenSpec) -> Result<()> {
    if let Some(kind) = gen.kind() {
        if kind != model.task_kind() {
            return Err(Error::Config {
                key: "model".into(),
                msg: format!("{} model cannot train on {kind:?} tasks", model.kind()),
            });
        }
    }
    Ok(())
}

/// Episodic meta-training: each episode averages the objective and its
/// gradient over `meta_batch` fresh tasks and takes one Adam ascent step.
pub fn meta_train(model: &Model, gen: &TaskGenSpec, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    gen.validate()?;
    check_kinds(model, gen)?;
    let start = Instant::now();
    let mut params = model.init_params(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_INIT, 0)))?;
    let held_out = eval_tasks(gen, cfg)?;
    let lr = cfg.lr_map();
    let mut adam = AdamState::new(params.num_scalars());
    let mut metrics = Vec::new();
    let mut trace = Vec::with_capacity(cfg.episodes);
    let mut aborted = None;
    let mut done = 0;

    let batch = |params: &crate::autodiff::ParamSet, episode: usize| -> Result<(f64, f64, Vec<f64>)> {
        let mut value = 0.0;
        let mut kl = 0.0;
        let mut grad = vec![0.0; params.num_scalars()];
        for b in 0..cfg.meta_batch {
            let idx = (episode * cfg.meta_batch + b) as u64;
            let task = sample_task(gen, derive_seed(cfg.seed, STREAM_TRAIN_TASK, idx))?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_TRAIN_NOISE, idx));
            let tg = model.task_grad(params, &task, &mut rng)?;
            value += tg.value;
            kl += tg.kl;
            for (g, t) in grad.iter_mut().zip(&tg.grad) {
                *g += t;
            }
        }
        let k = cfg.meta_batch as f64;
        Ok((value / k, kl / k, grad.into_iter().map(|g| g / k).collect()))
    };

    for episode in 0..=cfg.episodes {
        let (value, kl, grad) = match batch(&params, episode) {
            Ok(r) => r,
            Err(e) if is_numerical(&e) => {
                aborted = Some(e);
                break;
            }
            Err(e) => return Err(e),
        };
        if episode % cfg.eval_every == 0 || episode == cfg.episodes {
            let metric = eval_metric(model, &params, &held_out);
            let metric = match metric {
                Ok(m) => m,
                Err(e) if is_numerical(&e) => {
                    aborted = Some(e);
                    break;
                }
                Err(e) => return Err(e),
            };
            metrics.push(MetricsRow {
                episode,
                objective: value,
                kl_term: kl,
                eval_metric: metric,
                wallclock_s: start.elapsed().as_secs_f64(),
            });
        }
        if episode == cfg.episodes {
            break;
        }
        trace.push(value);
        let descent: Vec<f64> = grad.iter().map(|g| -g).collect();
        let mut next = params.clone();
        let mut next_adam = adam.clone();
        if let Err(e) = adam_step(&mut next, &descent, &mut next_adam, &lr) {
            aborted = Some(e);
            break;
        }
        params = next;
        adam = next_adam;
        done = episode + 1;
    }

    let checkpoint = Checkpoint::new(model.clone(), params, gen.clone(), done, cfg.seed);
    if let Some(path) = &cfg.checkpoint {
        checkpoint.save(path)?;
    }
    Ok(TrainOutcome { checkpoint, metrics, objective_trace: trace, aborted })
}

fn is_numerical(e: &Error) -> bool {
    matches!(e, Error::NonFinite(_) | Error::NonFiniteGradient(_) | Error::NotPositiveDefinite { .. })
}
