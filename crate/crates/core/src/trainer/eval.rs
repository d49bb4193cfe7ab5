use serde::{Deserialize, Serialize};

use super::model::Checkpoint;
use super::train::STREAM_TEST_TASK;
use crate::error::{Error, Result};
use crate::tasks::{derive_seed, sample_task, TaskGenSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotReport {
    #[serde(rename = "K")]
    pub k: usize,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    /// `1.96 std / sqrt(tasks)`; 0 for a single task.
    pub ci95: f64,
    pub tasks: usize,
    #[serde(skip)]
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub shots: Vec<ShotReport>,
    /// Test-time adaptation steps used for MAML checkpoints.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inner_steps: Option<usize>,
}

impl EvalReport {
    pub fn get(&self, k: usize) -> Option<&ShotReport> {
        self.shots.iter().find(|s| s.k == k)
    }
}

/// Mean, sample standard deviation and 95% half-width of `values`.
pub fn mean_ci(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, 0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    (mean, std, 1.96 * std / (n as f64).sqrt())
}

/// Scores a checkpoint on `n_tasks` fresh tasks per shot count. Task `i`
/// uses the same seed at every K and for every checkpoint, so two models
/// evaluated with one `seed` see the same functions.
pub fn evaluate(
    ck: &Checkpoint,
    gen: &TaskGenSpec,
    shots: &[usize],
    n_tasks: usize,
    inner_steps: Option<usize>,
    seed: u64,
) -> Result<EvalReport> {
    if n_tasks == 0 {
        return Err(Error::Invalid("evaluation needs at least one task".into()));
    }
    let shot_list: Vec<Option<usize>> =
        if shots.is_empty() { vec![gen.shots()] } else { shots.iter().map(|&k| Some(k)).collect() };
    let mut out = Vec::with_capacity(shot_list.len());
    for k in shot_list {
        let g = k.map_or_else(|| gen.clone(), |k| gen.with_shots(k));
        let mut values = Vec::with_capacity(n_tasks);
        for i in 0..n_tasks {
            let task = sample_task(&g, derive_seed(seed, STREAM_TEST_TASK, i as u64))?;
            values.push(ck.model.task_metric(&ck.params, &task, inner_steps)?);
        }
        let (mean, std, ci95) = mean_ci(&values);
        out.push(ShotReport {
            k: k.unwrap_or(0),
            metric: ck.model.metric_name().into(),
            mean,
            std,
            ci95,
            tasks: n_tasks,
            values,
        });
    }
    let inner_steps = match &ck.model {
        super::Model::Maml(m) => Some(inner_steps.unwrap_or(m.cfg.inner_steps_test)),
        super::Model::Gpvib(_) => None,
    };
    Ok(EvalReport { shots: out, inner_steps })
}
