use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::RunConfig;
use super::Command;
use crate::error::{Error, Result};
use crate::gpvib::{argmax_of_means, class_probabilities, Task, TaskKind};
use crate::linalg::Matrix;
use crate::tasks::{derive_seed, load_tasks, sample_sinusoid, TaskGenSpec};
use crate::trainer::{evaluate, fmt9, meta_train, write_metrics, Checkpoint, EvalReport, Model, ModelKind};

const STREAM_PREDICT_NOISE: u64 = 6;
const STREAM_CURVE_TASK: u64 = 7;

pub(super) fn dispatch(cmd: Command, env_seed: Option<String>, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Train { config, out: dir, seed } => train(&config, dir.as_deref(), seed, env_seed),
        Command::Eval { checkpoint, shots, tasks, inner_steps, seed } => {
            let ck = load_checkpoint(&checkpoint)?;
            let shots = parse_shots(&shots)?;
            let gen = ck.task_gen.clone();
            let rep = evaluate(&ck, &gen, &shots, tasks, inner_steps, seed)?;
            emit(out, &eval_json(&rep))
        }
        Command::Predict { checkpoint, support, query, stream, seed } => {
            let ck = load_checkpoint(&checkpoint)?;
            emit(out, &predict(&ck, &support, &query, stream, seed)?)
        }
        Command::ExportCurves { checkpoint, shots, grid, tasks, seed } => {
            let ck = load_checkpoint(&checkpoint)?;
            emit(out, &export_curves(&ck, &parse_shots(&shots)?, &parse_grid(&grid)?, tasks, seed)?)
        }
        Command::SweepBeta { config, betas, out: dir, shots, tasks, seed } => {
            emit(out, &sweep_beta(&config, &betas, &dir, shots.as_deref(), tasks, seed, env_seed)?)
        }
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())?;
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).map_err(|e| match e {
        Error::NonFinite(m) => Error::Invalid(format!("bad checkpoint {}: non-finite {m}", path.display())),
        other => Error::Invalid(format!("bad checkpoint {}: {other}", path.display())),
    })
}

fn read_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config { key: "--config".into(), msg: format!("{}: {e}", path.display()) })?;
    RunConfig::parse(&text)
}

fn resolve_seed(cfg: &mut RunConfig, flag: Option<u64>, env_seed: Option<String>) -> Result<()> {
    if let Some(s) = env_seed {
        cfg.train.seed = s.trim().parse().map_err(|_| Error::Config { key: super::SEED_ENV.into(), msg: format!("cannot parse `{s}`") })?;
    }
    if let Some(s) = flag {
        cfg.train.seed = s;
    }
    Ok(())
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

/// Trains and writes `checkpoint`, `metrics.csv` and `config.resolved` into
/// `dir`. A numerical abort still writes all three, with the last good
/// parameters, before reporting the error.
fn train_into(cfg: &RunConfig, dir: &Path) -> Result<Checkpoint> {
    let model = cfg.build_model()?;
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut resolved = cfg.clone();
    resolved.out = Some(dir.to_path_buf());
    std::fs::write(dir.join("config.resolved"), resolved.resolved()).map_err(|e| io_err(dir, e))?;
    let outcome = meta_train(&model, &cfg.task, &cfg.train)?;
    outcome.checkpoint.save(&dir.join("checkpoint"))?;
    write_metrics(&outcome.metrics, &dir.join("metrics.csv"))?;
    match outcome.aborted {
        Some(e) => Err(e),
        None => Ok(outcome.checkpoint),
    }
}

fn train(config: &Path, out: Option<&Path>, seed: Option<u64>, env_seed: Option<String>) -> Result<()> {
    let mut cfg = read_config(config)?;
    resolve_seed(&mut cfg, seed, env_seed)?;
    let dir = out.map(Path::to_path_buf).or_else(|| cfg.out.clone()).ok_or_else(|| Error::Config {
        key: "out".into(),
        msg: "no output directory: pass --out or set `out` in the config".into(),
    })?;
    train_into(&cfg, &dir).map(|_| ())
}

/// `5,10,20`, `1..7` (inclusive) or a mix of both.
pub fn parse_shots(s: &str) -> Result<Vec<usize>> {
    let bad = || Error::Config { key: "--shots".into(), msg: format!("expected a list like 5,10,20 or 1..7, got `{s}`") };
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
            if a > b {
                return Err(bad());
            }
            out.extend(a..=b);
        } else {
            out.push(part.parse().map_err(|_| bad())?);
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

/// `a:b:n`, n evenly spaced points from a to b inclusive.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let bad = |msg: &str| Error::Config { key: "--grid".into(), msg: format!("{msg} in `{s}`") };
    let parts: Vec<&str> = s.split(':').collect();
    let [a, b, n] = parts.as_slice() else { return Err(bad("expected a:b:n")) };
    let a: f64 = a.trim().parse().map_err(|_| bad("bad start"))?;
    let b: f64 = b.trim().parse().map_err(|_| bad("bad end"))?;
    let n: usize = n.trim().parse().map_err(|_| bad("bad count"))?;
    if !(a.is_finite() && b.is_finite()) || n == 0 {
        return Err(bad("need finite ends and n >= 1"));
    }
    if n == 1 {
        return Ok(vec![a]);
    }
    Ok((0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect())
}

fn eval_json(rep: &EvalReport) -> String {
    let rows: Vec<String> = rep
        .shots
        .iter()
        .map(|r| {
            format!(
                "{{\"K\": {}, \"metric\": \"{}\", \"mean\": {}, \"std\": {}, \"ci95\": {}, \"tasks\": {}}}",
                r.k,
                r.metric,
                fmt9(r.mean),
                fmt9(r.std),
                fmt9(r.ci95),
                r.tasks
            )
        })
        .collect();
    let steps = rep.inner_steps.map_or(String::new(), |s| format!(", \"inner_steps\": {s}"));
    format!("{{\"shots\": [{}]{steps}}}\n", rows.join(", "))
}

/// All rows of every task in a file, ignoring the support/query roles.
fn points(path: &Path, dim: usize) -> Result<(Matrix, Vec<f64>)> {
    let tasks = load_tasks(path)?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for t in &tasks {
        if t.input_dim() != dim && (t.n_support() + t.n_query()) > 0 {
            return Err(Error::DimensionMismatch(format!("{}: inputs have {} columns, model takes {dim}", path.display(), t.input_dim())));
        }
        for (x, y) in [(&t.x_support, &t.y_support), (&t.x_query, &t.y_query)] {
            for j in 0..y.len() {
                xs.extend_from_slice(x.row_slice(j));
                ys.push(y[j]);
            }
        }
    }
    Ok((Matrix::from_vec(ys.len(), dim, xs)?, ys))
}

fn predict(ck: &Checkpoint, support: &Path, query: &Path, stream: bool, seed: u64) -> Result<String> {
    let params = &ck.params;
    let mut out = String::new();
    match &ck.model {
        Model::Gpvib(g) => {
            let dim = g.net.input_dim();
            let (xs, ys) = points(support, dim)?;
            let (xq, _) = points(query, dim)?;
            if let TaskKind::Classification { n_classes } = g.kind {
                crate::gpvib::labels(&ys, n_classes)?;
            }
            let moments: Box<dyn Fn(&[f64]) -> Result<(Vec<f64>, f64)>> = if stream {
                let mut state = g.stream_state()?;
                for j in 0..ys.len() {
                    g.stream_ingest(&mut state, params, xs.row_slice(j), ys[j])?;
                }
                Box::new(move |x| g.stream_predict(&state, params, x))
            } else {
                let fitted = g.fit(params, &xs, &ys)?;
                Box::new(move |x| g.marginal_q(&fitted, params, x))
            };
            match g.kind {
                TaskKind::Regression => {
                    out.push_str("mean,var\n");
                    for j in 0..xq.rows() {
                        let (m, v) = moments(xq.row_slice(j))?;
                        let _ = writeln!(out, "{},{}", fmt9(m[0]), fmt9(v));
                    }
                }
                TaskKind::Classification { n_classes } => {
                    let head: Vec<String> = (0..n_classes).map(|n| format!("p_{n}")).collect();
                    let _ = writeln!(out, "{},label", head.join(","));
                    for j in 0..xq.rows() {
                        let (m, v) = moments(xq.row_slice(j))?;
                        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_PREDICT_NOISE, j as u64));
                        let eps = Matrix::from_fn(g.cfg.mc_samples, n_classes, |_, _| rng.sample(StandardNormal));
                        let probs = class_probabilities(&m, v, &eps)?;
                        let cols: Vec<String> = probs.iter().map(|p| fmt9(*p)).collect();
                        let _ = writeln!(out, "{},{}", cols.join(","), argmax_of_means(&m));
                    }
                }
            }
        }
        Model::Maml(m) => {
            if stream {
                return Err(Error::Invalid("--stream needs a GP-VIB checkpoint".into()));
            }
            let dim = m.net.sizes[0];
            let (xs, ys) = points(support, dim)?;
            let (xq, _) = points(query, dim)?;
            let task = Task::new(xs, ys, Matrix::zeros(0, dim), vec![], TaskKind::Regression)?;
            let adapted = if task.n_support() == 0 { params.clone() } else { m.adapted_params(params, &task, m.cfg.inner_steps_test)? };
            out.push_str("mean,var\n");
            for j in 0..xq.rows() {
                let _ = writeln!(out, "{},0", fmt9(m.predict(&adapted, xq.row_slice(j))?));
            }
        }
    }
    Ok(out)
}

fn export_curves(ck: &Checkpoint, shots: &[usize], grid: &[f64], tasks: usize, seed: u64) -> Result<String> {
    if !matches!(ck.task_gen, TaskGenSpec::Sinusoid { .. }) {
        return Err(Error::Invalid("curve export needs a sinusoid checkpoint".into()));
    }
    let params = &ck.params;
    let mut out = String::from("task,K,x,mean,std,truth\n");
    for t in 0..tasks {
        for &k in shots {
            let (task, truth) = sample_sinusoid(&ck.task_gen.with_shots(k), derive_seed(seed, STREAM_CURVE_TASK, t as u64))?;
            let curve: Vec<(f64, f64)> = match &ck.model {
                Model::Gpvib(g) => {
                    let fitted = g.fit(params, &task.x_support, &task.y_support)?;
                    grid.iter()
                        .map(|&x| g.predict_regression(&fitted, params, &[x]).map(|p| (p.mean, p.var.max(0.0).sqrt())))
                        .collect::<Result<_>>()?
                }
                Model::Maml(m) => {
                    let adapted = m.adapted_params(params, &task, m.cfg.inner_steps_test)?;
                    grid.iter().map(|&x| m.predict(&adapted, &[x]).map(|y| (y, 0.0))).collect::<Result<_>>()?
                }
            };
            for (&x, (mean, sd)) in grid.iter().zip(curve) {
                let _ = writeln!(out, "{t},{k},{},{},{},{}", fmt9(x), fmt9(mean), fmt9(sd), fmt9(truth.eval(x)));
            }
        }
    }
    Ok(out)
}

fn sweep_beta(
    config: &Path,
    betas: &str,
    dir: &Path,
    shots: Option<&str>,
    tasks: usize,
    seed: Option<u64>,
    env_seed: Option<String>,
) -> Result<String> {
    let mut cfg = read_config(config)?;
    resolve_seed(&mut cfg, seed, env_seed)?;
    if cfg.model == ModelKind::Maml {
        return Err(Error::Config { key: "model".into(), msg: "plain MAML has no beta; use gpvib or stochastic-maml".into() });
    }
    let betas: Vec<f64> = betas
        .split(',')
        .map(|b| b.trim().parse::<f64>().ok().filter(|v| *v >= 0.0 && v.is_finite()))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::Config { key: "--betas".into(), msg: format!("expected non-negative numbers, got `{betas}`") })?;
    let shots = match shots {
        Some(s) => parse_shots(s)?,
        None => cfg.task.shots().map(|k| vec![k]).unwrap_or_default(),
    };
    let mut out = String::from("beta,K,metric,mean,ci95\n");
    for beta in betas {
        let mut run = cfg.clone();
        if run.model == ModelKind::Gpvib {
            run.vib.beta = beta;
        } else {
            run.maml.beta = beta;
        }
        let ck = train_into(&run, &dir.join(format!("beta_{beta}")))?;
        let rep = evaluate(&ck, &run.task, &shots, tasks, None, run.train.seed)?;
        for r in &rep.shots {
            let _ = writeln!(out, "{},{},{},{},{}", fmt9(beta), r.k, r.metric, fmt9(r.mean), fmt9(r.ci95));
        }
    }
    Ok(out)
}
