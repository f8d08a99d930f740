//! Command-line orchestration for preference-vector extraction, position
//! calibration, steered evaluation, sweeps, and latency measurement.

pub mod artifacts;
pub mod cli;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod qa;
pub mod report;

pub use config::{ExperimentConfig, GateKind, Overrides, SweepMode};
pub use error::{HarnessError, Stage, StageError};
pub use pipeline::{EvalContext, Harness};
pub use report::ReportRow;
