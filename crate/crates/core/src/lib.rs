//! Intergenerational rank mobility: rank and proxy estimators, a
//! latent-skill family simulator, simulated-method-of-moments calibration
//! and counterfactual trend decomposition.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod decomposition;
pub mod error;
pub mod estimators;
pub mod lw;
pub mod model;
pub mod pipeline;
pub mod population;
pub mod ranking;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
