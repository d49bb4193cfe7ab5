//! Reverse-mode differentiation over matrix-valued expressions.
//!
//! Objectives are built on a [`Tape`] from a [`ParamSet`] bound as leaves;
//! [`gradient`] then returns the flat gradient in parameter order. Cholesky
//! factors and triangular solves are first-class operations with their own
//! reverse rules, and because adjoints are recorded as ordinary tape nodes
//! the result of [`Tape::grad`] can be differentiated again.

mod check;
mod params;
mod tape;

pub use check::{check_gradient, GradCheck};
pub use params::{gradient, Bound, Param, ParamGroup, ParamSet};
pub use tape::{logsumexp, sigmoid, softplus, Tape, Var};
