//! Dynamic propensity model for sparse purchase histories.
//!
//! A customer's latent propensity decays geometrically and is pushed up by
//! marketing touches; purchases are Bernoulli draws through a logistic link.
//! The crate filters the latent path with particles, fits the parameters by
//! stochastic gradient ascent on the conditional likelihood, and provides
//! lagged-logistic baselines, a matching simulator and ROC evaluation.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod error;
pub mod estimation;
pub mod eval;
pub mod filter;
pub mod io;
pub mod model;
pub mod rng;
pub mod simulate;

pub use error::{DpmError, Result};
pub use filter::{estimate_path, FilterConfig, PathMode};
pub use model::{CustomerHistory, Dataset, ModelParams, PropensityPath};
