//! Distributional critics trained by quantile-coupled flow matching, with
//! the baselines, exact tabular oracles, and experiment drivers used to
//! check them.

pub mod approx;
pub mod baselines;
pub mod dist1d;
pub mod env;
pub mod flowcritic;
mod error;
pub mod kv;
pub mod trainers;

pub use error::{Error, Result};
