//! Configuration, experiment drivers and file output for the `tvmc` binary.

pub mod config;
pub mod error;
pub mod experiments;
pub mod output;
pub mod presets;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
