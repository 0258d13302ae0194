//! Learned optimizers that are convergent by construction.

pub mod autodiff;
pub mod baselines;
pub mod convergence;
pub mod data;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod meta;
pub mod objectives;
pub mod rng;
pub mod stable;
pub mod update;

pub use error::{Error, Result};
