//! Run configuration: one TOML document with model, latent network,
//! training, tracking, data and evaluation sections.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clnet::{Branch, ClNetConfig};
use crate::error::{config_err, Error, Result};
use crate::evalbench::{load_dataset, synth_suite, Sequence, SynthSpec};
use crate::siamese::BackboneConfig;
use crate::tracker::TrackerConfig;
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synth,
    /// Directories of OTB-layout sequences.
    Dir,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub train_dir: Option<PathBuf>,
    pub test_dir: Option<PathBuf>,
    /// Accept whitespace-separated ground-truth lines.
    pub allow_whitespace: bool,
    pub synth: SynthSpec,
    pub train_sequences: usize,
    pub test_sequences: usize,
    /// First seed of the held-out synthetic split.
    pub test_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synth,
            train_dir: None,
            test_dir: None,
            allow_whitespace: false,
            synth: SynthSpec::default(),
            train_sequences: 50,
            test_sequences: 20,
            test_seed: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub base: TrainConfig,
    pub clnet: TrainConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            base: TrainConfig { epochs: 5, ..TrainConfig::default() },
            clnet: TrainConfig { epochs: 5, seed: 1, ..TrainConfig::default() },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Worker threads for benchmark runs.
    pub workers: usize,
    /// Report the first frame in diagnostics.
    pub include_first: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { workers: 1, include_first: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub checkpoint: PathBuf,
    /// Results root; the `CLNET_RESULTS_DIR` environment variable takes precedence.
    pub results: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { checkpoint: PathBuf::from("clnet.ckpt.json"), results: PathBuf::from("results") }
    }
}

pub const RESULTS_ENV: &str = "CLNET_RESULTS_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: BackboneConfig,
    pub clnet: ClNetConfig,
    pub training: TrainingConfig,
    pub tracking: TrackerConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: BackboneConfig::default(),
            clnet: ClNetConfig { latent_channels: 16, hidden: 32, ..ClNetConfig::default() },
            training: TrainingConfig::default(),
            tracking: TrackerConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let hidden = self.model.head_hidden;
        self.clnet.validate(Branch::Cls, hidden)?;
        self.clnet.validate(Branch::Reg, hidden)?;
        self.training.base.validate()?;
        self.training.clnet.validate()?;
        self.tracking.validate()?;
        self.data.synth.validate()?;
        if self.eval.workers == 0 {
            return config_err("eval.workers must be positive");
        }
        if self.data.source == DataSource::Synth && (self.data.train_sequences == 0 || self.data.test_sequences == 0) {
            return config_err("data.train_sequences and data.test_sequences must be positive");
        }
        Ok(())
    }

    /// Directory for training data, required when the source is `dir`.
    pub fn train_dir(&self) -> Result<&Path> {
        required_dir(&self.data.train_dir, "data.train_dir")
    }

    pub fn test_dir(&self) -> Result<&Path> {
        required_dir(&self.data.test_dir, "data.test_dir")
    }

    pub fn train_set(&self) -> Result<Vec<Sequence>> {
        match self.data.source {
            DataSource::Synth => synth_suite(&self.data.synth, self.data.synth.seed, self.data.train_sequences),
            DataSource::Dir => load_dataset(self.train_dir()?, self.data.allow_whitespace),
        }
    }

    pub fn test_set(&self) -> Result<Vec<Sequence>> {
        match self.data.source {
            DataSource::Synth => synth_suite(&self.data.synth, self.data.test_seed, self.data.test_sequences),
            DataSource::Dir => load_dataset(self.test_dir()?, self.data.allow_whitespace),
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        hash_json(self)
    }

    /// Hash of the fields that fix the shapes stored in a checkpoint.
    pub fn model_hash(&self) -> Result<String> {
        hash_json(&(&self.model, &self.clnet))
    }

    pub fn results_root(&self) -> PathBuf {
        std::env::var_os(RESULTS_ENV).map_or_else(|| self.paths.results.clone(), PathBuf::from)
    }
}

fn required_dir<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    match value {
        None => config_err(format!("missing key {key}")),
        Some(p) if !p.is_dir() => config_err(format!("{key}: {} is not a directory", p.display())),
        Some(p) => Ok(p),
    }
}

pub fn hash_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
