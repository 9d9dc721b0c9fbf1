//! Configuration, datasets, artifact formats and the scripted experiments
//! behind the `cmgen` command line.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod experiments;
pub mod log;
pub mod samples;

use std::path::Path;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use dataset::{DatasetConfig, DatasetKind, ToyDataset};

use crate::inference::InferenceError;
use crate::metrics::MetricError;
use crate::model::ModelError;
use crate::tensor::TensorError;
use crate::training::TrainError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed artifact: {0}")]
    Format(String),
    #[error("{artifact} was produced under config hash {found}, expected {expected}")]
    HashMismatch {
        artifact: String,
        found: String,
        expected: String,
    },
    #[error("training aborted on a non-finite value at step {step}: {detail} (state dumped to {dump})")]
    NonFinite { step: u64, detail: String, dump: String },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Process exit status: 2 for configuration problems, 3 for a
    /// non-finite abort, 4 for I/O and malformed files, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) | Self::HashMismatch { .. } => 2,
            Self::Train(TrainError::Config(_)) => 2,
            Self::NonFinite { .. } => 3,
            Self::Io { .. } | Self::Format(_) => 4,
            _ => 1,
        }
    }
}

fn ensure_parent(path: &Path) -> Result<(), HarnessError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
        }
        _ => Ok(()),
    }
}

/// Writes via a temporary sibling and a rename, so readers never see a
/// partial file.
fn write_file(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    ensure_parent(path)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| HarnessError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
}
