//! JSON checkpoints holding the complete dynamic state of a training run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::training::TrainerState;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Step, online and target parameters, optimizer moments, sampler loss
/// history and random-stream position. Floats are written in shortest
/// round-trip form, so loading restores every bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub state: TrainerState,
}

impl Checkpoint {
    pub fn new(config_hash: &str, state: TrainerState) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config_hash: config_hash.to_string(),
            state,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        let json = serde_json::to_vec(self).expect("checkpoint serializes");
        super::write_file(path, &json)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_slice(&bytes)
            .map_err(|e| HarnessError::Format(format!("{}: {e}", path.display())))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(HarnessError::Format(format!(
                "{}: checkpoint version {} (expected {CHECKPOINT_VERSION})",
                path.display(),
                ckpt.version
            )));
        }
        Ok(ckpt)
    }

    /// Loads and insists on `config_hash`.
    pub fn load_matching(path: &Path, config_hash: &str) -> Result<Self, HarnessError> {
        let ckpt = Self::load(path)?;
        super::log::check_hash(path, &ckpt.config_hash, config_hash)?;
        Ok(ckpt)
    }
}
