//! Training runs, generation, evaluation and the comparison experiments.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::dataset::{mixture_moments, DatasetKind, ToyDataset};
use super::log::{write_table, LossLog};
use super::HarnessError;
use crate::inference::{generate_multi, generate_single, StepPlan};
use crate::metrics::{self, FeatureSet, McdScale};
use crate::model::{Coefficients, DenoiserParams, Sample};
use crate::sampler::{SamplerKind, SamplerState};
use crate::schedule::TimeGrid;
use crate::tensor::{Array, Rng};
use crate::training::{Batch, LossNorm, PaddingMode, StepRecord, TrainError, Trainer, TrainerState};

/// Stream of the run seed driving batch, index and noise draws in training.
pub const TRAIN_STREAM: u64 = 0;
/// Stream used to initialize the online network.
pub const INIT_STREAM: u64 = 2;
/// Stream used for generation noise.
pub const GENERATE_STREAM: u64 = 3;

/// Rows of features pushed through the network at once during generation.
const GENERATE_CHUNK_ROWS: usize = 4096;
/// Trailing steps averaged into the "final loss" of a run.
const FINAL_WINDOW: usize = 100;

/// File layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn loss_log(&self) -> PathBuf {
        self.root.join("loss.csv")
    }

    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.root.join("checkpoints").join(format!("step_{step:06}.json"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.root.join("final.json")
    }

    pub fn nan_dump(&self) -> PathBuf {
        self.root.join("nan_dump.json")
    }

    pub fn samples(&self) -> PathBuf {
        self.root.join("samples.cmg")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval.csv")
    }
}

/// A fresh trainer for `cfg`, with the online network initialized from the
/// run seed.
pub fn build_trainer(cfg: &RunConfig, data: &ToyDataset) -> Result<Trainer, HarnessError> {
    let arch = cfg.architecture(data.bins(), data.cond_dim(), 0);
    let online = DenoiserParams::init(arch, &mut Rng::with_stream(cfg.seed, INIT_STREAM))?;
    let (n0, _) = cfg.curriculum.at(0).map_err(TrainError::from)?;
    let sampler = SamplerState::new(cfg.sampler.clone(), n0).map_err(TrainError::from)?;
    Ok(Trainer::new(
        cfg.train.clone(),
        cfg.grid,
        cfg.curriculum,
        sampler,
        online,
        Rng::with_stream(cfg.seed, TRAIN_STREAM),
    )?)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    /// Records of the steps run by this call.
    pub records: Vec<StepRecord>,
}

/// Trains until step `until` (the curriculum horizon when `None`),
/// optionally starting from `resume`.
///
/// With a run directory the loss log, periodic checkpoints, the final
/// checkpoint and the resolved config are written there. On a non-finite
/// loss the trainer state is dumped next to them and training stops.
pub fn train(
    cfg: &RunConfig,
    data: &ToyDataset,
    dir: Option<&RunDir>,
    resume: Option<TrainerState>,
    until: Option<u64>,
) -> Result<TrainOutcome, HarnessError> {
    let hash = cfg.hash();
    let mut trainer = build_trainer(cfg, data)?;
    if let Some(state) = resume {
        trainer.restore(state)?;
    }
    let until = until.unwrap_or(cfg.curriculum.total_steps);
    let mut log = match dir {
        Some(d) => {
            super::write_file(&d.config(), cfg.to_toml().as_bytes())?;
            Some(if trainer.step > 0 {
                LossLog::resume(&d.loss_log(), &hash, trainer.step)?
            } else {
                LossLog::create(&d.loss_log(), &hash)?
            })
        }
        None => None,
    };
    let every = cfg.run.checkpoint_every;
    let mut records = Vec::new();
    while trainer.step < until {
        let record = match trainer.sample_batch(&data.items).and_then(|b| trainer.train_step(&b)) {
            Ok(r) => r,
            Err(TrainError::NonFinite { step, n, detail }) => {
                let dump = match dir {
                    Some(d) => {
                        if let Some(log) = log.as_mut() {
                            log.flush()?;
                        }
                        let path = d.nan_dump();
                        Checkpoint::new(&hash, trainer.state()).save(&path)?;
                        path.display().to_string()
                    }
                    None => "(no run directory)".into(),
                };
                return Err(HarnessError::NonFinite {
                    step,
                    detail: format!("{detail} (index {n})"),
                    dump,
                });
            }
            Err(e) => return Err(e.into()),
        };
        if let (Some(log), Some(d)) = (log.as_mut(), dir) {
            log.write(&record)?;
            if every > 0 && trainer.step % every == 0 && trainer.step < until {
                log.flush()?;
                Checkpoint::new(&hash, trainer.state()).save(&d.checkpoint(trainer.step))?;
            }
        }
        records.push(record);
    }
    if let (Some(log), Some(d)) = (log.as_mut(), dir) {
        log.flush()?;
        Checkpoint::new(&hash, trainer.state()).save(&d.final_checkpoint())?;
    }
    Ok(TrainOutcome { trainer, records })
}

/// Mean total loss over the last steps of a run.
pub fn final_loss(records: &[StepRecord], pick: impl Fn(&StepRecord) -> f64) -> f64 {
    let tail = &records[records.len().saturating_sub(FINAL_WINDOW)..];
    tail.iter().map(pick).sum::<f64>() / tail.len().max(1) as f64
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub samples: Vec<Sample>,
    pub seconds: f64,
}

/// Generates `count` samples with `steps` network evaluations each.
///
/// Sample `i` takes its conditioning and frame mask from dataset item
/// `i mod len`, so output `i` pairs with that item for paired metrics.
/// Padded frames are zeroed.
pub fn generate(
    cfg: &RunConfig,
    params: &DenoiserParams,
    data: &ToyDataset,
    steps: usize,
    count: usize,
) -> Result<Generated, HarnessError> {
    let grid = TimeGrid::from_params(cfg.grid, cfg.inference.plan_grid).map_err(TrainError::from)?;
    let plan = StepPlan::from_grid(&grid, steps)?;
    let coeffs = Coefficients::new(cfg.grid.epsilon, cfg.train.sigma_data);
    let mut rng = Rng::with_stream(cfg.seed, GENERATE_STREAM);
    let frames = data.items[0].0.frames();
    let per_chunk = (GENERATE_CHUNK_ROWS / frames).max(1);
    let bins = data.bins();
    let n_speakers = params.architecture().n_speakers;

    let start = Instant::now();
    let mut samples = Vec::with_capacity(count);
    let mut first = 0;
    while first < count {
        let last = (first + per_chunk).min(count);
        let picks: Vec<_> = (first..last)
            .map(|i| {
                let (s, c) = &data.items[i % data.len()];
                (s, c)
            })
            .collect();
        let batch = Batch::from_items(&picks, n_speakers)?;
        let shape = [batch.rows(), bins];
        let out = if steps == 1 {
            generate_single(params, &batch.ctx, shape, &mut rng, grid.t_max(), &coeffs)?
        } else {
            generate_multi(params, &batch.ctx, shape, &mut rng, &plan, &coeffs)?
        };
        let data = out.data();
        for b in 0..batch.samples {
            let rows = b * batch.frames..(b + 1) * batch.frames;
            let mask = batch.mask[rows.clone()].to_vec();
            let mut values = data[rows.start * bins..rows.end * bins].to_vec();
            for (f, keep) in mask.iter().enumerate() {
                if !keep {
                    values[f * bins..(f + 1) * bins].fill(0.0);
                }
            }
            samples.push(Sample::new(Array::new(vec![batch.frames, bins], values)?, mask)?);
        }
        first = last;
    }
    Ok(Generated {
        samples,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Mean and covariance of the training distribution, when known in closed
/// form.
pub fn analytic_moments(cfg: &RunConfig) -> Option<(DVector<f64>, DMatrix<f64>)> {
    match cfg.data.kind {
        DatasetKind::Gaussian => Some(mixture_moments(&cfg.data.means[..1], cfg.data.std)),
        DatasetKind::GaussianMixture => Some(mixture_moments(&cfg.data.means, cfg.data.std)),
        _ => None,
    }
}

/// Valid frames of every sample, one feature row per frame.
pub fn frame_features(samples: &[Sample]) -> Result<FeatureSet, HarnessError> {
    let rows: Vec<Vec<f64>> = samples
        .iter()
        .flat_map(|s| (0..s.frames()).filter(|&f| s.mask()[f]).map(|f| s.values().row(f).to_vec()))
        .collect();
    Ok(FeatureSet::from_rows(&rows)?)
}

fn valid_part(s: &Sample, frames: usize) -> Result<Array, HarnessError> {
    Ok(Array::new(
        vec![frames, s.bins()],
        s.values().data()[..frames * s.bins()].to_vec(),
    )?)
}

/// Per-frame mean over bins, the contour compared by RMSE and FFE.
fn energy(a: &Array) -> Vec<f64> {
    (0..a.rows()).map(|r| a.row(r).iter().sum::<f64>() / a.cols() as f64).collect()
}

/// Every `len / n`-th row, at most `n` of them.
fn strided(set: &FeatureSet, n: usize) -> Result<FeatureSet, HarnessError> {
    let stride = set.rows().div_ceil(n).max(1);
    let rows: Vec<Vec<f64>> = (0..set.rows()).step_by(stride).map(|i| set.row(i)).collect();
    Ok(FeatureSet::from_rows(&rows)?)
}

/// The selected metrics of `gen` against `reference`, in canonical order.
///
/// Paired metrics compare `gen[i]` with `reference[i]` over the frames both
/// mark valid. `w2` needs analytic moments and `rtf` a synthesis time; each
/// is skipped when its input is missing.
pub fn evaluate(
    cfg: &RunConfig,
    gen: &[Sample],
    reference: &[Sample],
    synthesis_seconds: Option<f64>,
) -> Result<Vec<(String, f64)>, HarnessError> {
    let selected = |name: &str| cfg.metrics.select.iter().any(|s| s == name);
    let gen_feats = frame_features(gen)?;
    let ref_feats = frame_features(reference)?;
    let pairs: Vec<(Array, Array)> = gen
        .iter()
        .zip(reference)
        .map(|(g, r)| {
            let frames = g.valid_frames().min(r.valid_frames());
            Ok((valid_part(g, frames)?, valid_part(r, frames)?))
        })
        .collect::<Result<_, HarnessError>>()?;
    let mean_over = |f: &dyn Fn(&Array, &Array) -> Result<f64, metrics::MetricError>| {
        let total = pairs.iter().map(|(g, r)| f(g, r)).sum::<Result<f64, _>>()?;
        Ok::<f64, HarnessError>(total / pairs.len().max(1) as f64)
    };
    let contours = || {
        let g: Vec<f64> = pairs.iter().flat_map(|(g, _)| energy(g)).collect();
        let r: Vec<f64> = pairs.iter().flat_map(|(_, r)| energy(r)).collect();
        (g, r)
    };

    let mut out = Vec::new();
    for &name in &super::config::METRIC_NAMES {
        if !selected(name) {
            continue;
        }
        let value = match name {
            "fid" => metrics::fid(&ref_feats, &gen_feats)?,
            "w2" => match analytic_moments(cfg) {
                Some((m, c)) if m.len() == gen_feats.dim() => metrics::gaussian_w2(&gen_feats, &m, &c)?,
                _ => continue,
            },
            "recall" => {
                let n = cfg.metrics.recall_rows;
                metrics::recall(&strided(&ref_feats, n)?, &strided(&gen_feats, n)?, cfg.metrics.recall_k)?
            }
            "ssim" => mean_over(&|g, r| metrics::ssim(g, r, metrics::SSIM_C1, metrics::SSIM_C2))?,
            "mcd" => {
                let scale = if cfg.metrics.mcd_db {
                    McdScale::Decibel
                } else {
                    McdScale::Plain
                };
                mean_over(&|g, r| metrics::mcd(g, r, scale))?
            }
            "rmse" => {
                let (g, r) = contours();
                metrics::rmse(&g, &r)?
            }
            "ffe" => {
                let (g, r) = contours();
                metrics::ffe(&g, &r)?
            }
            "rtf" => match synthesis_seconds {
                Some(secs) => metrics::rtf(secs, metrics::audio_seconds(gen_feats.rows()))?,
                None => continue,
            },
            _ => unreachable!("validated metric name"),
        };
        if !value.is_finite() {
            return Err(HarnessError::Format(format!("metric {name} is not finite")));
        }
        out.push((name.to_string(), value));
    }
    Ok(out)
}

/// Parameters used for generation under `cfg`.
pub fn generator(cfg: &RunConfig, trainer: &Trainer) -> DenoiserParams {
    if cfg.inference.use_target {
        trainer.pair.target.clone()
    } else {
        trainer.pair.online.clone()
    }
}

/// A comparison table: header plus rows of formatted cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(labels: &[&str]) -> Self {
        Self {
            header: labels.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    /// The numeric cell of `row` under `column`.
    pub fn value(&self, row: usize, column: &str) -> Option<f64> {
        let col = self.header.iter().position(|h| h == column)?;
        self.rows.get(row)?.get(col)?.parse().ok()
    }

    pub fn write(&self, path: &Path, config_hash: &str) -> Result<(), HarnessError> {
        write_table(path, config_hash, &self.header, &self.rows)
    }

    fn push(&mut self, labels: Vec<String>, values: &[f64], metrics: &[(String, f64)]) -> Result<(), HarnessError> {
        if self.rows.is_empty() {
            self.header.extend(metrics.iter().map(|(m, _)| m.clone()));
        }
        let mut row = labels;
        for v in values.iter().chain(metrics.iter().map(|(_, v)| v)) {
            if !v.is_finite() {
                return Err(HarnessError::Format(format!("non-finite cell in row {row:?}")));
            }
            row.push(v.to_string());
        }
        if row.len() != self.header.len() {
            return Err(HarnessError::Format("table row does not match its header".into()));
        }
        self.rows.push(row);
        Ok(())
    }
}

/// Trains and evaluates one cell of an ablation under `dir`.
fn run_cell(
    cfg: &RunConfig,
    dir: &RunDir,
) -> Result<(Vec<StepRecord>, Vec<(String, f64)>), HarnessError> {
    let data = ToyDataset::generate(&cfg.data, cfg.seed)?;
    let outcome = train(cfg, &data, Some(dir), None, None)?;
    let params = generator(cfg, &outcome.trainer);
    let gen = generate(cfg, &params, &data, cfg.inference.steps, cfg.inference.samples)?;
    let reference: Vec<Sample> = data.samples().cloned().collect();
    let metrics = evaluate(cfg, &gen.samples, &reference, Some(gen.seconds))?;
    Ok((outcome.records, metrics))
}

/// One training run per sampler, otherwise identical.
pub fn ablate_samplers(cfg: &RunConfig, out: &Path) -> Result<Table, HarnessError> {
    let mut table = Table::new(&["sampler", "final_l_total", "final_l_ct"]);
    for kind in SamplerKind::ALL {
        let mut cell = cfg.clone();
        cell.sampler.kind = kind;
        let dir = RunDir::new(out.join("samplers").join(kind.name()));
        let (records, metrics) = run_cell(&cell, &dir)?;
        table.push(
            vec![kind.name().to_string()],
            &[final_loss(&records, |r| r.l_total), final_loss(&records, |r| r.l_ct)],
            &metrics,
        )?;
    }
    table.write(&out.join("ablate_samplers.csv"), &cfg.hash())?;
    Ok(table)
}

/// Padding treatment crossed with loss norm, on variable-length data and on
/// the same data with every frame valid.
pub fn ablate_padding(cfg: &RunConfig, out: &Path) -> Result<Table, HarnessError> {
    if cfg.data.kind != DatasetKind::SineBankSpectrogram || cfg.data.frames_min >= cfg.data.frames_max {
        return Err(HarnessError::Config(
            "ablate-padding needs data.kind = \"sine_bank_spectrogram\" with frames_min < frames_max".into(),
        ));
    }
    let mut table = Table::new(&["data", "padding", "loss_norm", "final_l_total", "final_l_ct", "final_l_recon"]);
    for (data_name, full) in [("variable", false), ("full", true)] {
        for (pad_name, padding) in [("include", PaddingMode::Include), ("exclude", PaddingMode::Exclude)] {
            for (norm_name, norm) in [("l1", LossNorm::L1), ("l2", LossNorm::L2)] {
                let mut cell = cfg.clone();
                if full {
                    cell.data.frames_min = cell.data.frames_max;
                }
                cell.train.padding = padding;
                cell.train.loss_norm = norm;
                let dir = RunDir::new(out.join("padding").join(format!("{data_name}_{pad_name}_{norm_name}")));
                let (records, metrics) = run_cell(&cell, &dir)?;
                table.push(
                    vec![data_name.into(), pad_name.into(), norm_name.into()],
                    &[
                        final_loss(&records, |r| r.l_total),
                        final_loss(&records, |r| r.l_ct),
                        final_loss(&records, |r| r.l_recon),
                    ],
                    &metrics,
                )?;
            }
        }
    }
    table.write(&out.join("ablate_padding.csv"), &cfg.hash())?;
    Ok(table)
}

/// Metrics of one trained model at each step count of `inference.sweep`.
pub fn sweep_steps(
    cfg: &RunConfig,
    params: &DenoiserParams,
    data: &ToyDataset,
    out: &Path,
) -> Result<Table, HarnessError> {
    let reference: Vec<Sample> = data.samples().cloned().collect();
    let mut table = Table::new(&["steps"]);
    for &steps in &cfg.inference.sweep {
        let gen = generate(cfg, params, data, steps, cfg.inference.samples)?;
        let metrics = evaluate(cfg, &gen.samples, &reference, Some(gen.seconds))?;
        table.push(vec![steps.to_string()], &[], &metrics)?;
    }
    table.write(&out.join("sweep_steps.csv"), &cfg.hash())?;
    Ok(table)
}
