//! Two-stage window pruning for run-to-failure sensor data and a small
//! transformer regressor for remaining-useful-life prediction.

pub mod causal;
pub mod error;
pub mod gp;
pub mod metrics;
pub mod pipeline;
pub mod predictor;
pub mod report;
pub mod screen;
pub mod series;
pub mod synth;

pub use error::{Error, Result};
