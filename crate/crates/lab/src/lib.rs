//! Experiment harness: configuration, the experiment recipes, CSV/JSON/SVG
//! output and the invariant suite.

pub mod check;
pub mod config;
pub mod error;
pub mod experiments;
pub mod render;
pub mod runlog;

pub use config::{ExperimentConfig, ExperimentKind};
pub use error::{LabError, Result};
