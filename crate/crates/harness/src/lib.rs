//! Experiment runner for synchronous federated Q-learning: configuration,
//! repeated runs, aggregation, and CSV/SVG/JSON artifacts.

pub mod aggregate;
pub mod config;
pub mod error;
pub mod experiment;
pub mod svg;

pub use config::{EnsembleSpec, ExperimentConfig, ExperimentKind};
pub use error::{HarnessError, Result};
pub use experiment::{execute, run_experiment, write_outcome, Outcome};
