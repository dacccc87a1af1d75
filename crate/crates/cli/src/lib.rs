//! Experiment driver behind the `aetlab` binary: configuration, runs with
//! checkpoints and per-epoch CSVs, the CE/AT ratio sweep, the epoch-cost
//! timing model and bound reports over recorded traces.

pub mod checkpoint;
pub mod config;
pub mod report;
pub mod run;
pub mod sweep;
pub mod timing;

use std::path::{Path, PathBuf};

use aetlab_core::datasets::DataError;
use aetlab_core::regimes::TrainError;
use aetlab_core::theory::TheoryError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("output directory {path}: {message}")]
    OutputDir { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("training: {0}")]
    Train(#[from] TrainError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("run directory {dir} is incomplete; missing: {}", missing.join(", "))]
    Incomplete { dir: PathBuf, missing: Vec<String> },
    #[error("artifact {path}: {message}")]
    Artifact { path: PathBuf, message: String },
    #[error("theory: {0}")]
    Theory(#[from] TheoryError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn artifact(path: &Path, message: impl ToString) -> Self {
        CliError::Artifact {
            path: path.to_path_buf(),
            message: message.to_string(),
        }
    }

    /// 1 for configuration problems caught before any training, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::OutputDir { .. } => 1,
            _ => 2,
        }
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("value serializes");
    bytes.push(b'\n');
    write_file(path, &bytes)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::artifact(path, e))
}

/// Worker count from `AETLAB_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var("AETLAB_THREADS").ok()?.trim().parse().ok().filter(|&n| n > 0)
}
