//! Config-driven front end: `lab run <config.json>`.

pub mod config;
pub mod error;
pub mod output;
pub mod run;

pub use config::{Command, ExperimentConfig, SourceKind, SCHEMA_VERSION};
pub use error::CliError;
pub use run::{run, RunOutcome};
