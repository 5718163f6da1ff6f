//! Experiment configuration, orchestration and the property suite.

pub mod config;
pub mod run;
pub mod verify;

pub use config::{ExperimentConfig, ExperimentKind, OUT_DIR_ENV};
pub use run::{run_experiment, RunOutcome};
pub use verify::{verify_all, verify_all_with, VerifyOptions, VerifyReport};
