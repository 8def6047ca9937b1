//! Orchestration for the `peelsort` binary: configuration, the pipeline
//! subcommands and the run report.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;

pub use config::PipelineConfig;
pub use error::CliError;
