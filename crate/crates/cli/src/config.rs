use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use volab::labels::CohortRecord;
use volab::models::ModelConfig;
use volab::training::{load_samples, Sample, TrainConfig};
use volab::volume::{generate_cohort, zscore_normalize, PhantomCohortSpec};

/// Where the volumes come from: a manifest on disk or a phantom cohort
/// generated in memory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phantom: Option<PhantomCohortSpec>,
}

/// A desk preset by name, or a full model configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Preset { preset: String },
    Config(ModelConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default)]
    pub instruments: Vec<String>,
    #[serde(default)]
    pub stages: Option<Vec<String>>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

fn default_k() -> usize {
    volab::mechanistic::TOP_K
}

fn default_samples() -> usize {
    32
}

fn default_folds() -> usize {
    5
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            instruments: Vec::new(),
            stages: None,
            k: default_k(),
            samples: default_samples(),
        }
    }
}

/// `train` overrides individual fields of the model family's desk
/// schedule; the master seed always replaces `train.seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelSpec,
    #[serde(default)]
    pub train: Option<Value>,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    pub output: PathBuf,
}

fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

/// Resolve a config-relative path.
fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl ExperimentConfig {
    /// Parse and make relative paths relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.output = resolve(base, &cfg.output);
        if let Some(m) = &cfg.dataset.manifest {
            cfg.dataset.manifest = Some(resolve(base, m));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.dataset.manifest, &self.dataset.phantom) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => bail!("dataset needs exactly one of `manifest` or `phantom`"),
        }
        if self.folds < 3 {
            bail!("need at least 3 folds, got {}", self.folds);
        }
        self.model_config()?;
        self.train_config()?;
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let cfg = match &self.model {
            ModelSpec::Preset { preset } => ModelConfig::desk_preset(preset)?,
            ModelSpec::Config(c) => c.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut value = serde_json::to_value(TrainConfig::desk_for(&self.model_config()?))?;
        if let Some(patch) = &self.train {
            merge(&mut value, patch);
        }
        let mut cfg: TrainConfig = serde_json::from_value(value).context("train block")?;
        cfg.seed = self.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Records and z-scored samples of the dataset block.
    pub fn load_dataset(&self) -> Result<(Vec<CohortRecord>, Vec<Sample>)> {
        if let Some(m) = &self.dataset.manifest {
            if !m.exists() {
                bail!("dataset manifest {} does not exist", m.display());
            }
            return Ok(load_samples(m)?);
        }
        let spec = self.dataset.phantom.as_ref().expect("validated");
        let mut records = Vec::with_capacity(spec.n);
        let mut samples = Vec::with_capacity(spec.n);
        for (i, (r, ph)) in generate_cohort(spec)?.into_iter().enumerate() {
            samples.push(Sample::from_record(i, &r, zscore_normalize(&ph.volume)?));
            records.push(r);
        }
        Ok((records, samples))
    }
}
