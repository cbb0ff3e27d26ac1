//! Config-driven experiment runner: simulate, fit, evaluate, cross-validate,
//! τ sweeps and channel-fusion sweeps over dataset bundles on disk.

pub mod bundle;
pub mod config;
pub mod cv;
pub mod error;
pub mod manifest;
pub mod run;

pub use config::{ExperimentConfig, Method, Mode};
pub use error::{HarnessError, Result};
pub use run::Context;
