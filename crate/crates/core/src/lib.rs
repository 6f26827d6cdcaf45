//! Scalable Gaussian process latent variable model with an augmented kernel
//! for known covariates, trained by minibatch stochastic variational inference.

pub mod checkpoint;
pub mod data;
pub mod elbo;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod grad;
pub mod kernel;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod selfcheck;
pub mod synthetic;
pub mod trainer;

pub use error::{GplvmError, Result};
