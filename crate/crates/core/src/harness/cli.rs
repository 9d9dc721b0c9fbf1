//! The `cmgen` command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use super::checkpoint::Checkpoint;
use super::config::{resolve_out, RunConfig};
use super::dataset::ToyDataset;
use super::experiments::{self, RunDir};
use super::log::{check_hash, write_metrics};
use super::samples::{read_meta, read_samples, write_samples, SampleMeta};
use super::HarnessError;
use crate::model::{DenoiserParams, Sample};

#[derive(Debug, Parser)]
#[command(name = "cmgen", version, about = "Consistency-model training and sampling on synthetic data")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run config; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set train.lr0=3e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Override the run seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; relative paths resolve against $CMGEN_OUT.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model, writing the loss log and checkpoints.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many total steps instead of the curriculum horizon.
        #[arg(long)]
        until: Option<u64>,
    },
    /// Sample from a trained checkpoint into a CMG1 file.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Network evaluations per sample (default: inference.steps).
        #[arg(long)]
        steps: Option<usize>,
        /// Number of samples (default: inference.samples).
        #[arg(long)]
        count: Option<usize>,
        /// Output file (default: <out>/samples.cmg).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score generated samples against a reference set.
    Evaluate {
        #[arg(long)]
        samples: PathBuf,
        /// Reference CMG1 file (default: the configured dataset).
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Accept samples produced under a different config hash.
        #[arg(long)]
        allow_hash_mismatch: bool,
    },
    /// Train once per sampler and tabulate the results.
    AblateSamplers,
    /// Train every padding mode x loss norm cell and tabulate the results.
    AblatePadding,
    /// Score one checkpoint at each configured step count.
    SweepSteps {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

/// Parses the process arguments, runs the command and maps failures to
/// exit codes.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cmgen: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// The config named by the global flags, with overrides applied.
pub fn load_config(global: &GlobalArgs) -> Result<RunConfig, HarnessError> {
    let mut overrides = global.overrides.clone();
    if let Some(seed) = global.seed {
        overrides.push(format!("seed={seed}"));
    }
    let mut cfg = match &global.config {
        Some(path) => RunConfig::load(path, &overrides)?,
        None => RunConfig::with_overrides("", &overrides)?,
    };
    if let Some(out) = &global.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<(), HarnessError> {
    let cfg = load_config(&cli.global)?;
    let out = cfg.resolved_out_dir();
    let dir = RunDir::new(&out);
    let hash = cfg.hash();
    match &cli.command {
        Command::Train { resume, until } => {
            let data = ToyDataset::generate(&cfg.data, cfg.seed)?;
            let state = match resume {
                Some(path) => Some(Checkpoint::load_matching(&resolve_out(path), &hash)?.state),
                None => None,
            };
            let outcome = experiments::train(&cfg, &data, Some(&dir), state, *until)?;
            println!(
                "trained to step {} ({} steps this run); log {}, checkpoint {}",
                outcome.trainer.step,
                outcome.records.len(),
                dir.loss_log().display(),
                dir.final_checkpoint().display()
            );
        }
        Command::Generate {
            checkpoint,
            steps,
            count,
            output,
        } => {
            let steps = steps.unwrap_or(cfg.inference.steps);
            let count = count.unwrap_or(cfg.inference.samples);
            if steps == 0 || steps > cfg.inference.plan_grid || count == 0 {
                return Err(HarnessError::Config(format!(
                    "need 1 <= steps <= {} and count >= 1",
                    cfg.inference.plan_grid
                )));
            }
            let params = load_generator(&cfg, &resolve_out(checkpoint))?;
            let data = ToyDataset::generate(&cfg.data, cfg.seed)?;
            let gen = experiments::generate(&cfg, &params, &data, steps, count)?;
            let path = output.as_deref().map_or_else(|| dir.samples(), resolve_out);
            let meta = SampleMeta {
                config_hash: hash,
                count,
                steps: Some(steps),
                synthesis_seconds: Some(gen.seconds),
            };
            write_samples(&path, &gen.samples, &meta)?;
            println!("wrote {count} samples ({steps} steps, {:.3} s) to {}", gen.seconds, path.display());
        }
        Command::Evaluate {
            samples,
            reference,
            allow_hash_mismatch,
        } => {
            let samples_path = resolve_out(samples);
            let meta = read_meta(&samples_path)?;
            if !allow_hash_mismatch {
                match &meta {
                    Some(m) => check_hash(&samples_path, &m.config_hash, &hash)?,
                    None => {
                        return Err(HarnessError::Format(format!(
                            "{} has no metadata sidecar; pass --allow-hash-mismatch to score it anyway",
                            samples_path.display()
                        )))
                    }
                }
            }
            let gen = read_samples(&samples_path)?;
            let reference = load_reference(&cfg, reference.as_deref(), *allow_hash_mismatch, &hash)?;
            let rows = experiments::evaluate(&cfg, &gen, &reference, meta.and_then(|m| m.synthesis_seconds))?;
            write_metrics(&dir.eval(), &hash, &rows)?;
            for (name, value) in &rows {
                println!("{name},{value}");
            }
        }
        Command::AblateSamplers => {
            let table = experiments::ablate_samplers(&cfg, &out)?;
            print_table(&table);
        }
        Command::AblatePadding => {
            let table = experiments::ablate_padding(&cfg, &out)?;
            print_table(&table);
        }
        Command::SweepSteps { checkpoint } => {
            let params = load_generator(&cfg, &resolve_out(checkpoint))?;
            let data = ToyDataset::generate(&cfg.data, cfg.seed)?;
            let table = experiments::sweep_steps(&cfg, &params, &data, &out)?;
            print_table(&table);
        }
    }
    Ok(())
}

fn load_generator(cfg: &RunConfig, path: &Path) -> Result<DenoiserParams, HarnessError> {
    let ckpt = Checkpoint::load_matching(path, &cfg.hash())?;
    Ok(if cfg.inference.use_target {
        ckpt.state.pair.target
    } else {
        ckpt.state.pair.online
    })
}

fn load_reference(
    cfg: &RunConfig,
    path: Option<&Path>,
    allow_mismatch: bool,
    hash: &str,
) -> Result<Vec<Sample>, HarnessError> {
    match path {
        Some(p) => {
            let p = resolve_out(p);
            if !allow_mismatch {
                if let Some(meta) = read_meta(&p)? {
                    check_hash(&p, &meta.config_hash, hash)?;
                }
            }
            read_samples(&p)
        }
        None => Ok(ToyDataset::generate(&cfg.data, cfg.seed)?.samples().cloned().collect()),
    }
}

fn print_table(table: &experiments::Table) {
    println!("{}", table.header.join(","));
    for row in &table.rows {
        println!("{}", row.join(","));
    }
}
