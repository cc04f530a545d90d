use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use volab::evaluation::{evaluate, write_ci, write_reliability, write_table2, write_table3, CiOptions, MetricsReport};
use volab::labels::{stratified_patient_split, write_manifest, CohortRecord, GmmModel};
use volab::mechanistic::{
    attention_report, cka_matrix, collect_activations, erf_report, write_centroids, write_dumps, write_erf_map,
    write_table4, write_table5, ActivationDump, CkaMode, DistanceOptions,
};
use volab::models::{build_model, ForwardOptions, ModelInstance};
use volab::seeds::derive_seed;
use volab::training::{
    batch_input, cross_validate, load_checkpoint, load_samples, read_predictions, run_fold, save_checkpoint,
    write_history, write_json, write_predictions, FoldOutcome, Prediction, Sample,
};
use volab::volume::{generate_cohort, write_volume, PhantomCohortSpec};

use crate::config::ExperimentConfig;
use crate::exit::UsageError;

// ---- phantom ----

pub struct PhantomArgs {
    pub n: usize,
    pub shape: [usize; 3],
    pub seed: u64,
    pub gmm: Option<PathBuf>,
    pub amplitude: [f64; 2],
    pub sparsity: f64,
    pub noise: f64,
    pub out: PathBuf,
}

/// `volumes/NNNN.volb`, `manifest.csv` and the generating spec as
/// `phantom.json`.
pub fn phantom(args: &PhantomArgs) -> Result<Vec<CohortRecord>> {
    let label_gmm = match &args.gmm {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let gmm: GmmModel = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            gmm.validate()?;
            gmm
        }
        None => GmmModel::phantom_default(),
    };
    let spec = PhantomCohortSpec {
        n: args.n,
        shape: args.shape,
        amplitude_range: args.amplitude,
        sparsity: args.sparsity,
        noise_sigma: args.noise,
        label_gmm,
        seed: args.seed,
    };
    let cohort = generate_cohort(&spec)?;
    let vol_dir = args.out.join("volumes");
    std::fs::create_dir_all(&vol_dir).with_context(|| format!("creating {}", vol_dir.display()))?;
    let mut records = Vec::with_capacity(cohort.len());
    for (r, ph) in cohort {
        write_volume(&args.out.join(&r.volume_path), &ph.volume)?;
        records.push(r);
    }
    write_manifest(&args.out.join("manifest.csv"), &records)?;
    write_json(&args.out.join("phantom.json"), &spec)?;
    Ok(records)
}

// ---- train ----

/// Identity of a training run, read back by `report`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub model: String,
    pub dim: usize,
    pub params: usize,
    pub folds: usize,
    pub seed: u64,
}

pub const RUN_FILE: &str = "run.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";

pub enum FoldSelection {
    One(usize),
    All,
}

#[derive(Serialize)]
struct FoldRow<'a> {
    index: usize,
    patient_id: &'a str,
    eye_id: &'a str,
    fold: usize,
}

fn write_fold(dir: &Path, outcome: &FoldOutcome, predictions: &[Prediction]) -> Result<()> {
    save_checkpoint(dir, &outcome.checkpoint)?;
    write_history(&dir.join("history.csv"), &outcome.history)?;
    write_predictions(&dir.join(PREDICTIONS_FILE), predictions)?;
    Ok(())
}

pub fn fold_dir(output: &Path, k: usize) -> PathBuf {
    output.join(format!("fold{k}"))
}

/// Train the requested folds and write checkpoints, histories and test
/// predictions under the output directory.
pub fn train(cfg: &ExperimentConfig, folds: FoldSelection, threads: usize) -> Result<Vec<Prediction>> {
    let model_cfg = cfg.model_config()?;
    let train_cfg = cfg.train_config()?;
    let (records, samples) = cfg.load_dataset()?;
    let assignment = stratified_patient_split(&records, 3, cfg.folds, cfg.seed)?;
    let out = &cfg.output;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let info = RunInfo {
        model: model_cfg.name.clone(),
        dim: model_cfg.input_dims,
        params: build_model(&model_cfg, 0)?.num_params(),
        folds: cfg.folds,
        seed: cfg.seed,
    };
    write_json(&out.join(RUN_FILE), &info)?;
    write_json(&out.join("model.json"), &model_cfg)?;
    write_json(&out.join("train.json"), &train_cfg)?;
    let rows: Vec<FoldRow> = records
        .iter()
        .zip(&assignment)
        .enumerate()
        .map(|(index, (r, &fold))| FoldRow {
            index,
            patient_id: &r.patient_id,
            eye_id: &r.eye_id,
            fold,
        })
        .collect();
    let mut w = csv::Writer::from_path(out.join("folds.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;

    match folds {
        FoldSelection::One(k) => {
            if k >= cfg.folds {
                return Err(UsageError(format!("fold {k} out of range for {} folds", cfg.folds)).into());
            }
            let (outcome, preds) = run_fold(&samples, &assignment, cfg.folds, k, &model_cfg, &train_cfg)?;
            report_fold(k, &outcome);
            write_fold(&fold_dir(out, k), &outcome, &preds)?;
            Ok(preds)
        }
        FoldSelection::All => {
            let cv = cross_validate(&samples, &assignment, cfg.folds, &model_cfg, &train_cfg, threads, &report_fold)?;
            for (k, outcome) in cv.folds.iter().enumerate() {
                let preds: Vec<Prediction> = cv.predictions.iter().filter(|p| p.fold == k).cloned().collect();
                write_fold(&fold_dir(out, k), outcome, &preds)?;
            }
            write_predictions(&out.join(PREDICTIONS_FILE), &cv.predictions)?;
            Ok(cv.predictions)
        }
    }
}

fn report_fold(k: usize, o: &FoldOutcome) {
    eprintln!(
        "fold {k}: {} epochs, best epoch {} (val mse {:.5})",
        o.history.len(),
        o.checkpoint.epoch,
        o.checkpoint.val_mse
    );
}

// ---- analyze ----

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Instrument {
    Erf,
    Attn,
    Cka,
}

pub struct AnalyzeArgs {
    pub checkpoints: Vec<PathBuf>,
    pub instrument: Instrument,
    pub stages: Option<Vec<String>>,
    pub k: usize,
    pub manifest: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub samples: Option<usize>,
    pub out: PathBuf,
}

/// First `n` samples of the dataset named by a manifest or an experiment
/// config.
fn analysis_samples(args: &AnalyzeArgs) -> Result<Vec<Sample>> {
    let (mut samples, default_n) = match (&args.manifest, &args.config) {
        (Some(m), None) => (load_samples(m)?.1, 32),
        (None, Some(c)) => {
            let cfg = ExperimentConfig::load(c)?;
            (cfg.load_dataset()?.1, cfg.analysis.samples)
        }
        _ => return Err(UsageError("analyze needs exactly one of --manifest or --config".into()).into()),
    };
    samples.truncate(args.samples.unwrap_or(default_n));
    if samples.is_empty() {
        bail!("no samples to analyze");
    }
    Ok(samples)
}

fn batches(model: &ModelInstance, samples: &[Sample]) -> Result<Vec<volab_tensor::Tensor<f32>>> {
    samples
        .chunks(8)
        .map(|c| Ok(batch_input(&model.config, &c.iter().collect::<Vec<_>>(), None)?))
        .collect()
}

/// Model ids: the configuration name, qualified by the checkpoint
/// directory when several checkpoints share a name.
fn model_ids(models: &[(PathBuf, ModelInstance)]) -> Vec<String> {
    let names: Vec<&str> = models.iter().map(|(_, m)| m.config.name.as_str()).collect();
    let unique = names.iter().collect::<BTreeSet<_>>().len() == names.len();
    models
        .iter()
        .map(|(p, m)| {
            if unique {
                m.config.name.clone()
            } else {
                let tail = p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
                format!("{}@{tail}", m.config.name)
            }
        })
        .collect()
}

/// Run one instrument and write its CSVs (and dumps) into `out`.
pub fn analyze(args: &AnalyzeArgs) -> Result<Vec<PathBuf>> {
    if args.checkpoints.is_empty() {
        return Err(UsageError("analyze needs at least one --checkpoint".into()).into());
    }
    let models = args
        .checkpoints
        .iter()
        .map(|p| Ok((p.clone(), load_checkpoint(p)?.model)))
        .collect::<Result<Vec<_>>>()?;
    let ids = model_ids(&models);
    if args.instrument == Instrument::Attn {
        if let Some((_, m)) = models.iter().find(|(_, m)| !m.config.family.has_attention()) {
            return Err(UsageError(format!("{}: model has no attention layers", m.config.name)).into());
        }
    }
    if args.instrument != Instrument::Cka && models.len() > 1 {
        return Err(UsageError("erf and attn take a single --checkpoint".into()).into());
    }
    let samples = analysis_samples(args)?;
    let out = &args.out;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut written = Vec::new();
    match args.instrument {
        Instrument::Erf => {
            let (_, model) = &models[0];
            let (row, maps) = erf_report(model, &ids[0], &batches(model, &samples)?, args.stages.as_deref())?;
            let path = out.join("table4.csv");
            write_table4(&path, &[row])?;
            written.push(path);
            for m in &maps {
                let path = out.join(format!("erf_{}.csv", m.tap));
                write_erf_map(&path, m)?;
                written.push(path);
            }
        }
        Instrument::Attn => {
            let (_, model) = &models[0];
            let targets: Vec<f64> = samples.iter().map(|s| s.target).collect();
            let input = batches(model, &samples)?;
            let opts = DistanceOptions {
                k: args.k,
                include_self: false,
            };
            let (rows, _) = attention_report(model, &ids[0], &input, &targets, opts)?;
            let path = out.join("table5.csv");
            write_table5(&path, &rows)?;
            written.push(path);
            let tape = volab_tensor::Tape::new();
            let vars = model.bind(&tape, false);
            let first = model.forward(&vars, tape.constant(input[0].clone()), &ForwardOptions::recording())?;
            let path = out.join("centroids.csv");
            write_centroids(&path, &first.attention)?;
            written.push(path);
        }
        Instrument::Cka => {
            let mut dumps: Vec<ActivationDump> = Vec::new();
            for ((_, model), id) in models.iter().zip(&ids) {
                let mut layers = collect_activations(model, id, &batches(model, &samples)?)?;
                if let Some(stages) = &args.stages {
                    layers.retain(|d| stages.contains(&d.layer));
                    if layers.is_empty() {
                        return Err(UsageError(format!("{id} has none of the stages {stages:?}")).into());
                    }
                }
                let path = out.join(format!("activations_{}.admp", id.replace(['/', '@'], "_")));
                write_dumps(&path, &layers)?;
                written.push(path);
                if models.len() > 1 {
                    // inter-model: the deepest requested stage of each model
                    dumps.push(layers.pop().expect("non-empty"));
                } else {
                    dumps = layers;
                }
            }
            let mode = if models.len() > 1 { CkaMode::InterModel } else { CkaMode::IntraModel };
            let m = cka_matrix(&dumps, mode)?;
            let path = out.join("cka.csv");
            m.write_csv(&path)?;
            written.push(path);
        }
    }
    Ok(written)
}

// ---- report ----

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

pub struct ReportArgs {
    pub runs: PathBuf,
    pub format: Format,
    pub ci: bool,
    pub resamples: usize,
    pub out: Option<PathBuf>,
}

/// Run directories under `runs`: itself when it holds a run, otherwise its
/// subdirectories that do, by name.
pub fn run_dirs(runs: &Path) -> Result<Vec<PathBuf>> {
    if runs.join(RUN_FILE).exists() {
        return Ok(vec![runs.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(runs)
        .with_context(|| format!("reading run directory {}", runs.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(RUN_FILE).exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        bail!("no runs (directories with {RUN_FILE}) in {}", runs.display());
    }
    Ok(dirs)
}

/// Pooled predictions of a run: the run-level file, or every trained
/// fold's file.
pub fn pooled_predictions(run: &Path) -> Result<Vec<Prediction>> {
    let pooled = run.join(PREDICTIONS_FILE);
    if pooled.exists() {
        return Ok(read_predictions(&pooled)?);
    }
    let info = read_run(run)?;
    let mut all = Vec::new();
    for k in 0..info.folds {
        let p = fold_dir(run, k).join(PREDICTIONS_FILE);
        if p.exists() {
            all.extend(read_predictions(&p)?);
        }
    }
    if all.is_empty() {
        bail!("{} has no predictions", run.display());
    }
    all.sort_by_key(|p| p.index);
    Ok(all)
}

pub fn read_run(run: &Path) -> Result<RunInfo> {
    let path = run.join(RUN_FILE);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
}

pub fn run_report(run: &Path, ci: Option<CiOptions>) -> Result<MetricsReport> {
    let info = read_run(run)?;
    let preds = pooled_predictions(run)?;
    let p: Vec<f64> = preds.iter().map(|p| p.prediction).collect();
    let t: Vec<f64> = preds.iter().map(|p| p.target).collect();
    let ci = ci.map(|c| CiOptions {
        seed: derive_seed(info.seed, "bootstrap", 0),
        ..c
    });
    Ok(evaluate(&info.model, info.dim, info.params, &p, &t, ci)?)
}

/// Table-2, Table-3 and reliability files (plus intervals with `--ci`),
/// one row per run.
pub fn report(args: &ReportArgs) -> Result<Vec<PathBuf>> {
    let ci = args.ci.then_some(CiOptions {
        resamples: args.resamples,
        level: volab::evaluation::BOOTSTRAP_LEVEL,
        seed: 0,
    });
    let reports = run_dirs(&args.runs)?
        .iter()
        .map(|r| run_report(r, ci))
        .collect::<Result<Vec<_>>>()?;
    let out = args.out.clone().unwrap_or_else(|| args.runs.join("report"));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut written = Vec::new();
    match args.format {
        Format::Csv => {
            let mut emit = |name: &str, f: fn(&Path, &[MetricsReport]) -> volab::Result<()>| -> Result<()> {
                let p = out.join(name);
                f(&p, &reports)?;
                written.push(p);
                Ok(())
            };
            emit("table2.csv", write_table2)?;
            emit("table3.csv", write_table3)?;
            emit("reliability.csv", write_reliability)?;
            if args.ci {
                emit("ci.csv", write_ci)?;
            }
        }
        Format::Json => {
            fn emit<T: Serialize>(out: &Path, name: &str, rows: &[T], written: &mut Vec<PathBuf>) -> Result<()> {
                let p = out.join(name);
                write_json(&p, &rows)?;
                written.push(p);
                Ok(())
            }
            let table2: Vec<_> = reports.iter().map(MetricsReport::table2).collect();
            let table3: Vec<_> = reports.iter().map(MetricsReport::table3).collect();
            let reliability: Vec<_> = reports.iter().flat_map(MetricsReport::reliability_rows).collect();
            emit(&out, "table2.json", &table2, &mut written)?;
            emit(&out, "table3.json", &table3, &mut written)?;
            emit(&out, "reliability.json", &reliability, &mut written)?;
            if args.ci {
                let ci: Vec<_> = reports.iter().flat_map(MetricsReport::ci_rows).collect();
                emit(&out, "ci.json", &ci, &mut written)?;
            }
        }
    }
    Ok(written)
}
