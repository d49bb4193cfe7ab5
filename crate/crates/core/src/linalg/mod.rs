//! Dense linear algebra and Gaussian densities.
//!
//! All reductions run in a fixed order, so repeated calls on identical
//! inputs are bit-identical.

mod cholesky;
mod gaussian;
mod matrix;
mod woodbury;

pub use cholesky::{cholesky, solve_triangular, LowerTriangular, Side, JITTER_LADDER};
pub(crate) use cholesky::solve_triangular_raw;
pub use gaussian::{kl_gaussian, mvn_logpdf, normal_logpdf, GaussianNd, LN_2PI};
pub use matrix::{dot, sorted_sum, Matrix};
pub use woodbury::{woodbury_logpdf, woodbury_posterior, WoodburyFactor};
