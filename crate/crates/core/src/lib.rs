//! Fusing averaged external data into hierarchical Bayesian models.

pub mod aggregate;
pub mod ep_core;
pub mod error;
pub mod gaussian;
pub mod mcmc;
pub mod model_api;
pub mod models_builtin;
pub mod oracle;
pub mod orchestrator;
pub mod psis;
pub mod report;

pub use error::{Error, Result};
