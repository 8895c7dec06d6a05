//! Experiment driver for the `fedlora` simulator: TOML configs, canned
//! presets, NDJSON run logs and multi-seed comparison tables.

pub mod compare;
pub mod config;
pub mod error;
pub mod experiment;
pub mod presets;

pub use compare::{compare_suite, ComparisonRow, ComparisonTable};
pub use config::ExperimentConfig;
pub use error::CliError;
pub use experiment::{build_simulation, run_experiment, RunOutput, RunSummary};
