//! Command-line front end: phantom cohorts, training, mechanistic analysis
//! and metric reports.

pub mod commands;
pub mod config;
pub mod exit;

use std::path::PathBuf;

use anyhow::Result;
use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

use commands::{AnalyzeArgs, FoldSelection, Format, Instrument, PhantomArgs, ReportArgs};
use config::ExperimentConfig;
use exit::UsageError;

/// File schemas written and read by the commands.
pub const SCHEMAS: &str = "\
File schemas (CSV files carry a header row; missing values are empty cells):
  manifest.csv          patient_id,eye_id,volume_path,p_kc,age,sex
  volumes/NNNN.volb     VOLB volume: magic, dims, spacing, f32 little-endian voxels
  phantom.json          generating spec (n, shape, amplitude_range, sparsity, noise_sigma, label_gmm, seed)
  run.json              {model, dim, params, folds, seed}
  model.json            model configuration
  train.json            training schedule
  folds.csv             index,patient_id,eye_id,fold
  foldK/checkpoint.vlck checkpoint parameters and buffers
  foldK/checkpoint.json {epoch, val_mse, model}
  foldK/history.csv     epoch,train_mse,val_mse,lr
  predictions.csv       index,patient_id,eye_id,fold,target,prediction
  table2.csv            model,dim,params,mse,mae,r2,pearson,brier,auroc
  table3.csv            model,dim,healthy_sens,healthy_spec,subclinical_sens,subclinical_spec,keratoconus_sens,keratoconus_spec,balanced_accuracy
  reliability.csv       model,dim,bin,mean_pred,positive_fraction,count
  ci.csv                model,dim,metric,lo,hi
  table4.csv            model,dim,stage1,stage2,stage3,stage4,et_ratio
  erf_<tap>.csv         z,y,x,gradient,normalized,mask
  table5.csv            model,dim,bin,mean,sd,median,pct_gt20,max
  centroids.csv         layer,token,z,y,x
  cka.csv               id,<one column per id>
  activations_<id>.admp ADMP dump: magic, version, model id, per layer (id, N, D, f32 little-endian rows)

JSON reports hold arrays of the same rows with the same field names.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
VOLAB_THREADS caps the worker threads of --parallel-folds.";

#[derive(Debug, Parser)]
#[command(name = "volab", version, about = "Volumetric anomaly-detection laboratory", after_long_help = SCHEMAS)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom cohort with soft labels.
    Phantom(PhantomCmd),
    /// Train one fold or every fold of an experiment.
    Train(TrainCmd),
    /// Run a mechanistic instrument on trained checkpoints.
    Analyze(AnalyzeCmd),
    /// Aggregate pooled predictions into metric tables.
    Report(ReportCmd),
}

fn parse_triple<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| format!("bad value `{p}`")))
        .collect()
}

fn parse_shape(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = parse_triple(s)?;
    <[usize; 3]>::try_from(v).map_err(|_| "shape takes three comma-separated sizes".into())
}

fn parse_range(s: &str) -> Result<[f64; 2], String> {
    let v: Vec<f64> = parse_triple(s)?;
    <[f64; 2]>::try_from(v).map_err(|_| "range takes two comma-separated numbers".into())
}

#[derive(Debug, Args)]
pub struct PhantomCmd {
    /// Number of volumes (two eyes per patient).
    #[arg(long)]
    pub n: usize,
    #[arg(long, value_parser = parse_shape, default_value = "32,32,32")]
    pub shape: [usize; 3],
    #[arg(long)]
    pub seed: u64,
    /// JSON mixture `{pi, mu, sigma}` for the soft labels.
    #[arg(long)]
    pub gmm: Option<PathBuf>,
    /// Lesion amplitude range `lo,hi`.
    #[arg(long, value_parser = parse_range, default_value = "0,2")]
    pub amplitude: [f64; 2],
    #[arg(long, default_value_t = 0.2)]
    pub sparsity: f64,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("folds").required(true).args(["fold", "all_folds"])))]
pub struct TrainCmd {
    #[arg(long)]
    pub config: PathBuf,
    /// Train only this (0-based) fold.
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long)]
    pub all_folds: bool,
    /// Folds trained concurrently with --all-folds.
    #[arg(long, default_value_t = 1)]
    pub parallel_folds: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum InstrumentArg {
    Erf,
    Attn,
    Cka,
}

#[derive(Debug, Args)]
pub struct AnalyzeCmd {
    /// Checkpoint directory; repeat for inter-model CKA.
    #[arg(long, required = true)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long, value_enum)]
    pub instrument: InstrumentArg,
    /// Comma-separated stage names (ERF taps or CKA layers).
    #[arg(long, value_delimiter = ',')]
    pub stages: Option<Vec<String>>,
    /// Attended tokens per query.
    #[arg(long, default_value_t = volab::mechanistic::TOP_K)]
    pub k: usize,
    #[arg(long, conflicts_with = "config")]
    pub manifest: Option<PathBuf>,
    /// Experiment config whose dataset supplies the inputs.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Use the first N samples.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FormatArg {
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct ReportCmd {
    /// A run directory, or a directory of run directories.
    #[arg(long)]
    pub runs: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: FormatArg,
    /// Add bootstrap confidence intervals.
    #[arg(long)]
    pub ci: bool,
    #[arg(long, default_value_t = volab::evaluation::BOOTSTRAP_RESAMPLES)]
    pub resamples: usize,
    /// Output directory (default `<runs>/report`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Worker threads for `--parallel-folds`, capped by `VOLAB_THREADS`.
pub fn thread_cap(requested: usize, env: Option<&str>) -> Result<usize> {
    if requested == 0 {
        return Err(UsageError("--parallel-folds must be at least 1".into()).into());
    }
    let cap = match env {
        Some(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&c| c > 0)
            .ok_or_else(|| UsageError(format!("VOLAB_THREADS must be a positive integer, got `{v}`")))?,
        None => usize::MAX,
    };
    Ok(requested.min(cap))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom(a) => {
            let records = commands::phantom(&PhantomArgs {
                n: a.n,
                shape: a.shape,
                seed: a.seed,
                gmm: a.gmm,
                amplitude: a.amplitude,
                sparsity: a.sparsity,
                noise: a.noise,
                out: a.out.clone(),
            })?;
            eprintln!("wrote {} volumes to {}", records.len(), a.out.display());
        }
        Command::Train(a) => {
            let cfg = ExperimentConfig::load(&a.config)?;
            let threads = thread_cap(a.parallel_folds, std::env::var("VOLAB_THREADS").ok().as_deref())?;
            let folds = match a.fold {
                Some(k) => FoldSelection::One(k),
                None => FoldSelection::All,
            };
            let preds = commands::train(&cfg, folds, threads)?;
            eprintln!("{} test predictions in {}", preds.len(), cfg.output.display());
        }
        Command::Analyze(a) => {
            let written = commands::analyze(&AnalyzeArgs {
                checkpoints: a.checkpoint,
                instrument: match a.instrument {
                    InstrumentArg::Erf => Instrument::Erf,
                    InstrumentArg::Attn => Instrument::Attn,
                    InstrumentArg::Cka => Instrument::Cka,
                },
                stages: a.stages,
                k: a.k,
                manifest: a.manifest,
                config: a.config,
                samples: a.samples,
                out: a.out,
            })?;
            for p in written {
                println!("{}", p.display());
            }
        }
        Command::Report(a) => {
            let written = commands::report(&ReportArgs {
                runs: a.runs,
                format: match a.format {
                    FormatArg::Csv => Format::Csv,
                    FormatArg::Json => Format::Json,
                },
                ci: a.ci,
                resamples: a.resamples,
                out: a.out,
            })?;
            for p in written {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}
