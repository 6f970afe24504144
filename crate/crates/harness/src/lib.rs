//! Config-driven experiments on the chamber-plate model: assemble the grid
//! and operators, integrate, estimate the well depth, run the enabled checks
//! and write a trace CSV plus a summary JSON.

pub mod config;
pub mod initial;
pub mod output;
pub mod pipeline;

pub use config::{ConfigError, ExperimentConfig};
pub use pipeline::{build_operators, run_depth, run_simulation, run_sweep, Outcome, PipelineError};

/// JSON Schema of the run summary.
pub const SUMMARY_SCHEMA: &str = include_str!("../schema/summary.v1.schema.json");
