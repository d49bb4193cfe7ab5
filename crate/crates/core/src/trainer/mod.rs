//! Episodic meta-training, Adam and the evaluation harness.

mod adam;
mod eval;
mod model;
mod train;

#[cfg(test)]
mod tests;

pub use adam::{adam_step, AdamState, LrMap, BETA1, BETA2, EPS};
pub use eval::{evaluate, mean_ci, EvalReport, ShotReport};
pub use model::{Checkpoint, Model, ModelKind, TaskGrad, CHECKPOINT_VERSION};
pub use train::{
    eval_tasks, fmt9, format_metrics, meta_train, write_metrics, MetricsRow, TrainConfig, TrainOutcome,
    METRICS_HEADER, STREAM_EVAL_TASK, STREAM_INIT, STREAM_TEST_TASK, STREAM_TRAIN_NOISE, STREAM_TRAIN_TASK,
};
