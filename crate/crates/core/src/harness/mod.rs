//! Experiment front end: configuration, seeded runs, checkpoint evaluation,
//! oracle suites and curve export.

pub mod config;
pub mod plot;
pub mod run;
pub mod verify;

pub use config::{Algorithm, ExperimentConfig, Family};
pub use run::{evaluate_checkpoint, run, RunRecord, RunStatus, Selection};
pub use verify::{run_suite, Suite, SuiteReport};
