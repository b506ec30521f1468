//! Experiment pipelines for textloc: every command reads and writes files
//! under one output root and leaves a manifest behind.

pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod report;

use std::path::{Path, PathBuf};

pub use config::{ConfigErrors, ExperimentConfig, Split, OUT_ENV};
pub use manifest::RunManifest;
pub use pipeline::{run_command, AblationParam, Command, Layout};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigErrors),
    #[error("missing input {}: run `{hint}` first", path.display())]
    MissingInput { path: PathBuf, hint: &'static str },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}: {1}")]
    Stage(&'static str, String),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}
