use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gradient, ParamSet, Tape};
use crate::error::{Error, Result};
use crate::gpvib::{self, argmax_of_means, GpVib, Task, TaskKind};
use crate::maml::Maml;
use crate::tasks::TaskGenSpec;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Gpvib,
    Maml,
    StochasticMaml,
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gpvib" => Ok(ModelKind::Gpvib),
            "maml" => Ok(ModelKind::Maml),
            "stochastic-maml" => Ok(ModelKind::StochasticMaml),
            _ => Err(format!("unknown model `{s}` (gpvib, maml, stochastic-maml)")),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Gpvib => "gpvib",
            ModelKind::Maml => "maml",
            ModelKind::StochasticMaml => "stochastic-maml",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "model")]
pub enum Model {
    Gpvib(GpVib),
    Maml(Maml),
}

/// Per-task training signal: objective value, its KL part and the gradient
/// of the objective (ascent direction) in flat parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskGrad {
    pub value: f64,
    pub kl: f64,
    pub grad: Vec<f64>,
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Gpvib(_) => ModelKind::Gpvib,
            Model::Maml(m) if m.stochastic => ModelKind::StochasticMaml,
            Model::Maml(_) => ModelKind::Maml,
        }
    }

    pub fn task_kind(&self) -> TaskKind {
        match self {
            Model::Gpvib(g) => g.kind,
            Model::Maml(_) => TaskKind::Regression,
        }
    }

    /// `"mse"` for regression, `"accuracy"` for classification.
    pub fn metric_name(&self) -> &'static str {
        match self.task_kind() {
            TaskKind::Regression => "mse",
            TaskKind::Classification { .. } => "accuracy",
        }
    }

    pub fn init_params(&self, rng: &mut impl Rng) -> Result<ParamSet> {
        match self {
            Model::Gpvib(g) => g.init_params(rng),
            Model::Maml(m) => m.init_params(rng),
        }
    }

    /// Objective and gradient on one task; `rng` supplies the MC noise.
    pub fn task_grad(&self, params: &ParamSet, task: &Task, rng: &mut impl Rng) -> Result<TaskGrad> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let (value, kl) = match self {
            Model::Gpvib(g) => {
                let noise = gpvib::sample_noise(g, task, rng);
                let parts = gpvib::objective(g, &mut tape, &bound, task, noise.as_ref())?;
                (parts.value, parts.kl)
            }
            Model::Maml(m) => {
                let noise = m.stochastic.then(|| m.sample_noise(params, rng));
                m.objective(&mut tape, &bound, task, noise.as_ref())?
            }
        };
        let (v, k) = (tape.item(value), tape.item(kl));
        if !v.is_finite() {
            return Err(Error::NonFinite("training objective".into()));
        }
        let grad = gradient(&mut tape, value, &bound)?;
        Ok(TaskGrad { value: v, kl: k, grad })
    }

    /// Query-set MSE or accuracy after adapting to the support set.
    /// `inner_steps` overrides the MAML test-time step count.
    pub fn task_metric(&self, params: &ParamSet, task: &Task, inner_steps: Option<usize>) -> Result<f64> {
        if task.n_query() == 0 {
            return Err(Error::Invalid("task has no query points to score".into()));
        }
        let n = task.n_query() as f64;
        match self {
            Model::Gpvib(g) => {
                g.check_task(task)?;
                let fitted = g.fit(params, &task.x_support, &task.y_support)?;
                let mut total = 0.0;
                for j in 0..task.n_query() {
                    let (means, _) = g.marginal_q(&fitted, params, task.x_query.row_slice(j))?;
                    total += match task.kind {
                        TaskKind::Regression => (means[0] - task.y_query[j]).powi(2),
                        TaskKind::Classification { .. } => f64::from(argmax_of_means(&means) == task.y_query[j] as usize),
                    };
                }
                Ok(total / n)
            }
            Model::Maml(m) => {
                let steps = inner_steps.unwrap_or(m.cfg.inner_steps_test);
                let adapted = m.adapted_params(params, task, steps)?;
                let mut total = 0.0;
                for j in 0..task.n_query() {
                    total += (m.predict(&adapted, task.x_query.row_slice(j))? - task.y_query[j]).powi(2);
                }
                Ok(total / n)
            }
        }
    }
}

/// Trained parameters with everything needed to rebuild the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: Model,
    pub params: ParamSet,
    pub task_gen: TaskGenSpec,
    pub episode: usize,
    pub seed: u64,
}

impl Checkpoint {
    pub fn new(model: Model, params: ParamSet, task_gen: TaskGenSpec, episode: usize, seed: u64) -> Self {
        Self { version: CHECKPOINT_VERSION, model, params, task_gen, episode, seed }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Invalid(format!("serializing checkpoint: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Parse { line: e.line(), msg: e.to_string() })?;
        match value.get("version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(CHECKPOINT_VERSION) => {}
            Some(v) => return Err(Error::Invalid(format!("checkpoint version {v}, expected {CHECKPOINT_VERSION}"))),
            None => return Err(Error::Invalid("checkpoint has no version field".into())),
        }
        let ck: Self = serde_json::from_value(value).map_err(|e| Error::Parse { line: 0, msg: e.to_string() })?;
        if !ck.params.to_flat().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}
