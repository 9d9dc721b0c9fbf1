//! Synthetic training sets and ingestion of sample files.

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::samples::read_samples;
use super::HarnessError;
use crate::model::{Conditioning, Sample};
use crate::tensor::{Array, Rng};

/// Stream of the run seed reserved for dataset generation.
pub const DATA_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// `N(means[0], std^2 I)`, one frame per sample.
    Gaussian,
    /// Equal-weight mixture of `N(means[i], std^2 I)`, one frame per sample.
    GaussianMixture,
    /// Variable-length `[frames, bins]` arrays of enveloped sinusoids with
    /// per-frame conditioning.
    SineBankSpectrogram,
    /// Samples read from `path`.
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub count: usize,
    pub means: Vec<Vec<f64>>,
    pub std: f64,
    pub bins: usize,
    /// Valid lengths are drawn uniformly from `frames_min..=frames_max`;
    /// every sample is padded to `frames_max`.
    pub frames_min: usize,
    pub frames_max: usize,
    pub path: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::GaussianMixture,
            count: 4096,
            means: vec![vec![1.0, -1.0], vec![-1.0, 1.0]],
            std: 0.5,
            bins: 8,
            frames_min: 8,
            frames_max: 32,
            path: None,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(format!("data: {m}")));
        match self.kind {
            DatasetKind::Gaussian | DatasetKind::GaussianMixture => {
                let Some(first) = self.means.first() else {
                    return bad("at least one mean is required");
                };
                if first.is_empty() || self.means.iter().any(|m| m.len() != first.len()) {
                    return bad("means must be non-empty and of equal length");
                }
                if self.means.iter().flatten().any(|v| !v.is_finite()) {
                    return bad("means must be finite");
                }
                if !(self.std > 0.0 && self.std.is_finite()) {
                    return bad("std must be > 0");
                }
            }
            DatasetKind::SineBankSpectrogram => {
                if self.bins == 0 {
                    return bad("bins must be >= 1");
                }
                if self.frames_min == 0 || self.frames_max < self.frames_min {
                    return bad("need 1 <= frames_min <= frames_max");
                }
            }
            DatasetKind::File => {
                if self.path.is_none() {
                    return bad("kind = \"file\" needs a path");
                }
            }
        }
        if self.kind != DatasetKind::File && self.count == 0 {
            return bad("count must be >= 1");
        }
        Ok(())
    }
}

/// Samples with their conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub kind: DatasetKind,
    pub items: Vec<(Sample, Conditioning)>,
}

impl ToyDataset {
    pub fn generate(cfg: &DatasetConfig, seed: u64) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let mut rng = Rng::with_stream(seed, DATA_STREAM);
        let items = match cfg.kind {
            DatasetKind::Gaussian => gaussian_items(&cfg.means[..1], cfg.std, cfg.count, &mut rng)?,
            DatasetKind::GaussianMixture => gaussian_items(&cfg.means, cfg.std, cfg.count, &mut rng)?,
            DatasetKind::SineBankSpectrogram => sine_bank_items(cfg, &mut rng)?,
            DatasetKind::File => {
                let path = cfg.path.as_ref().expect("validated");
                read_samples(path)?
                    .into_iter()
                    .map(|s| (s, Conditioning::none()))
                    .collect()
            }
        };
        if items.is_empty() {
            return Err(HarnessError::Config("data: dataset is empty".into()));
        }
        Ok(Self {
            kind: cfg.kind,
            items,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn bins(&self) -> usize {
        self.items[0].0.bins()
    }

    pub fn cond_dim(&self) -> usize {
        self.items[0].1.dim()
    }

    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.items.iter().map(|(s, _)| s)
    }
}

/// Mean and covariance of the equal-weight mixture `sum_i N(m_i, std^2 I) / k`.
pub fn mixture_moments(means: &[Vec<f64>], std: f64) -> (DVector<f64>, DMatrix<f64>) {
    let d = means[0].len();
    let k = means.len() as f64;
    let mut mean = DVector::zeros(d);
    let mut second = DMatrix::identity(d, d) * (std * std);
    for m in means {
        let v = DVector::from_column_slice(m);
        mean += &v / k;
        second += &v * v.transpose() / k;
    }
    let cov = second - &mean * mean.transpose();
    (mean, cov)
}

fn gaussian_items(
    means: &[Vec<f64>],
    std: f64,
    count: usize,
    rng: &mut Rng,
) -> Result<Vec<(Sample, Conditioning)>, HarnessError> {
    (0..count)
        .map(|_| {
            let m = &means[rng.below(means.len())];
            let row: Vec<f64> = m.iter().map(|mu| mu + std * rng.normal()).collect();
            let values = Array::from_rows(&[row])?;
            Ok((Sample::full(values)?, Conditioning::none()))
        })
        .collect()
}

/// Each sample is `a * sin(2 pi w f / 32 + phase) * exp(-(b - c)^2 / 2)` over
/// frames `f` and bins `b`, with amplitude `a <= 0.9` so values stay in
/// `[-1, 1]`. Conditioning per frame is the unit sinusoid and the centre
/// bin scaled to `[0, 1]`; padded frames are zero with zero conditioning.
fn sine_bank_items(
    cfg: &DatasetConfig,
    rng: &mut Rng,
) -> Result<Vec<(Sample, Conditioning)>, HarnessError> {
    let (bins, frames) = (cfg.bins, cfg.frames_max);
    let span = cfg.frames_max - cfg.frames_min + 1;
    let denom = (bins.max(2) - 1) as f64;
    (0..cfg.count)
        .map(|_| {
            let len = cfg.frames_min + rng.below(span);
            let amp = rng.uniform_range(0.3, 0.9);
            let freq = rng.uniform_range(0.5, 3.0);
            let phase = rng.uniform_range(0.0, std::f64::consts::TAU);
            let centre = rng.uniform_range(0.0, denom);
            let mut values = vec![0.0; frames * bins];
            let mut cond = vec![0.0; frames * 2];
            for f in 0..len {
                let wave = (std::f64::consts::TAU * freq * f as f64 / 32.0 + phase).sin();
                for b in 0..bins {
                    let env = (-(b as f64 - centre).powi(2) / 2.0).exp();
                    values[f * bins + b] = amp * wave * env;
                }
                cond[f * 2] = wave;
                cond[f * 2 + 1] = centre / denom;
            }
            let sample = Sample::with_length(Array::new(vec![frames, bins], values)?, len)?;
            let cond = Conditioning::vector(Array::new(vec![frames, 2], cond)?);
            Ok((sample, cond))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine_cfg(min: usize, max: usize) -> DatasetConfig {
        DatasetConfig {
            kind: DatasetKind::SineBankSpectrogram,
            count: 64,
            frames_min: min,
            frames_max: max,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn sine_bank_is_bounded_with_honest_masks() {
        let ds = ToyDataset::generate(&sine_cfg(4, 12), 5).unwrap();
        let mut lengths = std::collections::BTreeSet::new();
        for (s, c) in &ds.items {
            assert!(s.values().data().iter().all(|v| (-1.0..=1.0).contains(v)));
            assert_eq!(s.frames(), 12);
            let valid = s.valid_frames();
            lengths.insert(valid);
            assert!(s.mask()[..valid].iter().all(|m| *m));
            assert!(s.mask()[valid..].iter().all(|m| !*m));
            for f in valid..12 {
                assert!(s.values().row(f).iter().all(|v| *v == 0.0));
            }
            assert_eq!(c.dim(), 2);
        }
        assert!(lengths.len() > 1);
    }

    #[test]
    fn fixed_length_sine_bank_has_full_masks() {
        let ds = ToyDataset::generate(&sine_cfg(16, 16), 5).unwrap();
        assert!(ds.items.iter().all(|(s, _)| s.mask().iter().all(|m| *m)));
    }

    #[test]
    fn generation_is_seeded() {
        let cfg = DatasetConfig::default();
        assert_eq!(ToyDataset::generate(&cfg, 1).unwrap(), ToyDataset::generate(&cfg, 1).unwrap());
        assert_ne!(ToyDataset::generate(&cfg, 1).unwrap(), ToyDataset::generate(&cfg, 2).unwrap());
    }

    #[test]
    fn mixture_moments_by_hand() {
        let (m, c) = mixture_moments(&[vec![1.0, -1.0], vec![-1.0, 1.0]], 0.5);
        assert_eq!(m.as_slice(), &[0.0, 0.0]);
        assert_eq!(c.as_slice(), &[1.25, -1.0, -1.0, 1.25]);
        let (m, c) = mixture_moments(&[vec![2.0]], 0.5);
        assert_eq!((m[0], c[(0, 0)]), (2.0, 0.25));
    }

    #[test]
    fn sample_moments_match_the_mixture() {
        let cfg = DatasetConfig {
            count: 20_000,
            ..DatasetConfig::default()
        };
        let ds = ToyDataset::generate(&cfg, 3).unwrap();
        let n = ds.len() as f64;
        let mean0 = ds.samples().map(|s| s.values().data()[0]).sum::<f64>() / n;
        let var0 = ds.samples().map(|s| (s.values().data()[0] - mean0).powi(2)).sum::<f64>() / n;
        assert!(mean0.abs() < 0.03, "{mean0}");
        assert!((var0 - 1.25).abs() < 0.05, "{var0}");
    }

    #[test]
    fn invalid_settings_are_config_errors() {
        let mut cfg = DatasetConfig::default();
        cfg.std = 0.0;
        assert!(matches!(cfg.validate(), Err(HarnessError::Config(_))));
        let cfg = DatasetConfig {
            kind: DatasetKind::File,
            ..DatasetConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(sine_cfg(5, 4).validate().is_err());
    }
}
