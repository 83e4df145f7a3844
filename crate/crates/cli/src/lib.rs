//! Experiment harness: configuration, replications and CSV output.

pub mod config;
pub mod experiment;
pub mod output;
pub mod stats;

use std::path::{Path, PathBuf};

pub use config::{ConfigError, ExperimentConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("replication {replication}: {source}")]
    Run {
        replication: u64,
        source: pboem_core::Error,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {message}", path.display())]
    Csv { path: PathBuf, message: String },
}

impl CliError {
    pub(crate) fn csv(path: &Path, e: csv::Error) -> Self {
        CliError::Csv {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }

    /// 2 for configuration errors, 3 when a particle system degenerated,
    /// 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Run { source, .. } if source.is_degenerate() => 3,
            _ => 1,
        }
    }
}
