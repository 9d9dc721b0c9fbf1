//! The run configuration: one TOML document covering every module.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::dataset::DatasetConfig;
use super::HarnessError;
use crate::model::Architecture;
use crate::sampler::SamplerConfig;
use crate::schedule::{Curriculum, GridParams, TimeGrid};
use crate::training::TrainConfig;

/// Environment variable naming the root that relative output directories
/// are resolved against.
pub const OUT_ROOT_ENV: &str = "CMGEN_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DatasetConfig,
    pub grid: GridParams,
    pub curriculum: Curriculum,
    pub sampler: SamplerConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub run: RunSettings,
    pub inference: InferenceConfig,
    pub metrics: MetricsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("run"),
            data: DatasetConfig::default(),
            grid: GridParams::default(),
            curriculum: Curriculum::default(),
            sampler: SamplerConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            run: RunSettings::default(),
            inference: InferenceConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

/// Denoiser size. Input and conditioning widths come from the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub width: usize,
    pub blocks: usize,
    pub time_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 64,
            blocks: 4,
            time_dim: 32,
        }
    }
}

/// Bookkeeping that does not affect results.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    /// Write a checkpoint every this many steps (0 disables periodic ones;
    /// the final state is always written).
    pub checkpoint_every: u64,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            checkpoint_every: 5_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Steps `T` used by `generate`.
    pub steps: usize,
    /// Number of boundaries of the grid the step plan is taken from.
    pub plan_grid: usize,
    /// Samples written by `generate` and drawn per cell by the experiments.
    pub samples: usize,
    /// Step counts visited by `sweep-steps`.
    pub sweep: Vec<usize>,
    /// Generate with the EMA target network rather than the online one.
    pub use_target: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            steps: 1,
            plan_grid: 151,
            samples: 1_000,
            sweep: vec![1, 2, 4],
            use_target: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Any of `fid`, `w2`, `recall`, `ssim`, `mcd`, `rmse`, `ffe`, `rtf`.
    /// `w2` is reported only for datasets with analytic moments and `rtf`
    /// only when generation time is known.
    pub select: Vec<String>,
    pub recall_k: usize,
    /// Feature rows used by recall (it is quadratic in this).
    pub recall_rows: usize,
    pub mcd_db: bool,
}

pub const METRIC_NAMES: [&str; 8] = ["fid", "w2", "recall", "ssim", "mcd", "rmse", "ffe", "rtf"];

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            select: METRIC_NAMES.iter().map(|s| s.to_string()).collect(),
            recall_k: 3,
            recall_rows: 1_000,
            mcd_db: false,
        }
    }
}

/// The part of the config that determines the trained model and its data.
#[derive(Serialize)]
struct Hashed<'a> {
    seed: u64,
    data: &'a DatasetConfig,
    grid: &'a GridParams,
    curriculum: &'a Curriculum,
    sampler: &'a SamplerConfig,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        Self::with_overrides(text, &[])
    }

    /// Parses `text` and applies `key.path=value` overrides before
    /// deserializing. Values are read as TOML, falling back to a string.
    pub fn with_overrides(text: &str, overrides: &[String]) -> Result<Self, HarnessError> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |e: String| Err(HarnessError::Config(e));
        TimeGrid::from_params(self.grid, 2).map_err(|e| HarnessError::Config(e.to_string()))?;
        self.curriculum
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.sampler
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.data.validate()?;
        let m = self.model;
        if m.width == 0 || m.time_dim == 0 || m.time_dim % 2 != 0 {
            return bad(format!("model needs width >= 1 and an even time_dim (got {m:?})"));
        }
        let inf = &self.inference;
        if inf.plan_grid < 2 {
            return bad("inference.plan_grid must be >= 2".into());
        }
        if inf.steps == 0 || inf.steps > inf.plan_grid {
            return bad(format!(
                "inference.steps must lie in 1..={} (got {})",
                inf.plan_grid, inf.steps
            ));
        }
        if let Some(t) = inf.sweep.iter().find(|&&t| t == 0 || t > inf.plan_grid) {
            return bad(format!("inference.sweep entry {t} outside 1..={}", inf.plan_grid));
        }
        if inf.samples == 0 {
            return bad("inference.samples must be >= 1".into());
        }
        if let Some(name) = self
            .metrics
            .select
            .iter()
            .find(|n| !METRIC_NAMES.contains(&n.as_str()))
        {
            return bad(format!("unknown metric {name:?}"));
        }
        if self.metrics.recall_k == 0 || self.metrics.recall_rows <= self.metrics.recall_k {
            return bad("metrics need recall_k >= 1 and recall_rows > recall_k".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the seed, data, grid, curriculum, sampler, model and
    /// training sections. Output paths, checkpoint cadence, inference and
    /// metric settings do not change it.
    pub fn hash(&self) -> String {
        let view = Hashed {
            seed: self.seed,
            data: &self.data,
            grid: &self.grid,
            curriculum: &self.curriculum,
            sampler: &self.sampler,
            model: &self.model,
            train: &self.train,
        };
        let canonical = serde_json::to_vec(&view).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn architecture(&self, bins: usize, cond_dim: usize, n_speakers: usize) -> Architecture {
        Architecture {
            bins,
            cond_dim,
            n_speakers,
            width: self.model.width,
            blocks: self.model.blocks,
            time_dim: self.model.time_dim,
        }
    }

    /// `out_dir`, resolved against `$CMGEN_OUT` when relative.
    pub fn resolved_out_dir(&self) -> PathBuf {
        resolve_out(&self.out_dir)
    }
}

pub fn resolve_out(dir: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

fn apply_override(table: &mut toml::Table, item: &str) -> Result<(), HarnessError> {
    let Some((key, raw)) = item.split_once('=') else {
        return Err(HarnessError::Config(format!("override {item:?} is not key=value")));
    };
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(HarnessError::Config(format!("bad override key {key:?}")));
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut node = table;
    for p in parents {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(HarnessError::Config(format!("{key}: {p} is not a section"))),
        };
    }
    node.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = RunConfig::with_overrides(
            "seed = 3\n",
            &[
                "train.lr0=0.001".into(),
                "sampler.kind=uniform".into(),
                "data.means=[[0.0, 1.0]]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.lr0, 1e-3);
        assert_eq!(cfg.sampler.kind, crate::sampler::SamplerKind::Uniform);
        assert_eq!(cfg.data.means, vec![vec![0.0, 1.0]]);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::with_overrides("", &["train.batch_size=0".into()]).is_err());
        assert!(RunConfig::with_overrides("", &["train.nope=1".into()]).is_err());
        assert!(RunConfig::with_overrides("", &["missing_equals".into()]).is_err());
        assert!(RunConfig::with_overrides("", &["metrics.select=[\"wer\"]".into()]).is_err());
    }

    #[test]
    fn hash_tracks_model_settings_only() {
        let base = RunConfig::default();
        let mut moved = base.clone();
        moved.out_dir = "elsewhere".into();
        moved.inference.steps = 4;
        assert_eq!(base.hash(), moved.hash());
        let mut reseeded = base.clone();
        reseeded.seed = 1;
        assert_ne!(base.hash(), reseeded.hash());
        assert_eq!(base.hash().len(), 64);
    }
}
