//! Command-line front end for the plate reading cascade and the evaluation
//! suite. Every subcommand is a library function so it can be driven from
//! tests without spawning a process.

pub mod args;
pub mod commands;
pub mod config;
pub mod output;
pub mod truth;

use thiserror::Error;

use plateflow_core::backend::BackendError;
use plateflow_core::dataset::DatasetError;
use plateflow_core::metrics::MetricsError;
use plateflow_core::pipeline::PipelineError;
use plateflow_core::records::RecordError;

pub use args::{Cli, Command};
pub use commands::{
    cmd_detect, cmd_eval, cmd_read, cmd_seq_eval, cmd_stats, run, EvalOptions, EvalOutcome, Stage,
};
pub use config::{BackendKind, OutputFormat, Overrides, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_BACKEND: i32 = 4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CliError {
    /// Invalid flags, config file or incompatible inputs.
    #[error("configuration error: {0}")]
    Config(String),
    /// Unreadable or malformed images, labels or record files.
    #[error("data error: {0}")]
    Data(String),
    /// Inference backend missing, unavailable or returning bad tensors.
    #[error("backend error: {0}")]
    Backend(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Backend(_) => EXIT_BACKEND,
        }
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::Image(_) => CliError::Data(e.to_string()),
            _ => CliError::Backend(e.to_string()),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<RecordError> for CliError {
    fn from(e: RecordError) -> Self {
        match e {
            RecordError::Schema { .. } => CliError::Config(e.to_string()),
            RecordError::Parse { .. } => CliError::Data(e.to_string()),
        }
    }
}

fn pipeline_kind(e: &PipelineError) -> fn(String) -> CliError {
    match e {
        PipelineError::Backend(BackendError::Image(_)) | PipelineError::EmptyCrop(_) => {
            CliError::Data
        }
        PipelineError::BadPadRatio(_) => CliError::Config,
        PipelineError::Plate { source, .. } => pipeline_kind(source),
        _ => CliError::Backend,
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        pipeline_kind(&e)(e.to_string())
    }
}
