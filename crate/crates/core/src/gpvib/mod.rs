//! GP-VIB: a Gaussian-process encoder over the support function values,
//! trained with the variational information bottleneck objective.
//!
//! The encoder is `q(f^t) ∝ p(f^t | X^t) prod_j N(m_j | f_j, s_j)`, a GP
//! posterior under per-point Gaussian surrogates. For regression with the
//! exact encoder `m = y` and `s = sigma^2`; otherwise `(m, s)` come from the
//! heads in [`crate::features`]. Predictions for any input go through the
//! marginal `q(f*)`, which has the same form whether `x*` is a support or
//! a query point.

mod encoder;
mod model;
mod objective;
mod stream;
mod task;

#[cfg(test)]
mod tests;

pub use encoder::{
    amortized_encoder, argmax_of_means, class_probabilities, elbo_bound_check, exact_posterior, gaussian_encoder,
    ClassPrediction, Fitted, RegressionPrediction,
};
pub use model::{EncoderKind, GpVib, SolvePath, SupportTargets, VibConfig, LOG_NOISE};
pub use objective::{
    classification_objective, mc_softmax_term, objective, regression_objective, sample_noise,
    vib_objective_classification, vib_objective_regression, ClassNoise, ObjectiveParts,
};
pub use stream::StreamState;
pub use task::{labels, Task, TaskKind};
