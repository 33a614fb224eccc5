//! Bayesian quantile factor models.
//!
//! A quantile factor model ties the τ-th conditional quantile of each observed
//! variable to a small set of latent factors, `y_i = β f_i + ε_i` with
//! multivariate asymmetric Laplace errors. Inference runs a Gibbs sampler on the
//! normal/exponential mixture representation of the error law, with a
//! Metropolis step for the idiosyncratic scales away from the median.
//!
//! Modules:
//! - [`dists`]: asymmetric Laplace, GIG, truncated normal and Gaussian samplers.
//! - [`model`]: model specification, identifiability and implied moments.
//! - [`sampler`]: full conditionals, adaptive Metropolis and chain orchestration.
//! - [`qcor`]: univariate Bayesian quantile regression and quantile correlation.
//! - [`criteria`]: AIC, BIC, BIC*, ICOMP, RPS, MAE and MSE.
//! - [`diagnostics`]: split-R̂ and effective sample size.
//! - [`synthetic`]: seeded data generators.

// `!(x > 0.0)` is used deliberately so NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod criteria;
pub mod diagnostics;
pub mod dists;
mod error;
pub mod model;
pub mod qcor;
pub mod sampler;
pub mod synthetic;

pub use dists::{RngStream, Tau, TauConstants};
pub use error::{QfmError, Result};
pub use model::{ChainState, ModelSpec, PriorHyper, SpecViolation, ValidSpec};
pub use sampler::{McmcConfig, PosteriorSample, SigmaUpdate};
