//! Switching multiscale dynamical system models: simulation, filtering,
//! smoothing, EM learning and evaluation for joint spike/field recordings.

pub mod error;
pub mod evaluate;
pub mod filtering;
pub mod learning;
pub mod linalg;
pub mod model;
pub mod series;
pub mod simulate;
pub mod smoothing;
pub mod stats;

pub use error::{Result, SmdsError};
pub use model::{GaussianBelief, RegimeParams, SwitchingModel};
pub use series::{Modality, MultiscaleSeries};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
