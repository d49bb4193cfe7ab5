//! Meta-learning with variational information bottleneck objectives and
//! Gaussian-process encoders, with MAML baselines.

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod features;
pub mod gpvib;
pub mod kernels;
pub mod linalg;
pub mod maml;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/gp-encoder.md")]
    mod gp_encoder {}
    #[doc = include_str!("../../../book/src/objectives.md")]
    mod objectives {}
    #[doc = include_str!("../../../book/src/streaming.md")]
    mod streaming {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/maml.md")]
    mod maml {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
}
