//! Experiment configuration files (JSON).

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use slu_balance::model::ModelConfig;
use slu_balance::sampler::{Regime, SamplerConfig};
use slu_balance::trainer::{MethodName, TrainerConfig};
use slu_balance::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DataPaths {
    pub train: PathBuf,
    pub validation: PathBuf,
    #[serde(default)]
    pub test: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<PathBuf>,
}

/// A named intent group for reporting (e.g. the long-tail intents vs. the
/// head intents). Order in the config drives column order in tables.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroupSpec {
    pub name: String,
    pub intents: BTreeSet<String>,
}

fn default_sampler() -> SamplerConfig {
    SamplerConfig {
        batch_size: 64,
        seed: 0,
        regime: Regime::Random,
    }
}

/// One experiment: a method trained over several seeds on fixed corpora.
/// The sampler regime and per-run seeds are derived from the method and the
/// seed list; the sampler entry contributes the batch size.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub method: String,
    pub data: DataPaths,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default = "default_sampler")]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub groups: Vec<GroupSpec>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn method_name(&self) -> Result<MethodName> {
        self.method.parse()
    }

    pub fn validate(&self) -> Result<()> {
        self.method_name()?;
        self.model.validate()?;
        self.trainer.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.sampler.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn group_map(&self) -> BTreeMap<String, BTreeSet<String>> {
        self.groups
            .iter()
            .map(|g| (g.name.clone(), g.intents.clone()))
            .collect()
    }

    pub fn run_dir(&self, seed: u64) -> PathBuf {
        self.output_dir.join(&self.method).join(format!("seed_{seed}"))
    }
}

pub fn load_experiment_config(path: &Path) -> Result<ExperimentConfig> {
    let json = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let config: ExperimentConfig =
        serde_json::from_str(&json).map_err(|e| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
    Ok(config)
}

/// Per-run provenance written next to each checkpoint; compare uses it to
/// verify that runs share seeds and the exact test corpus.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunMeta {
    pub method: String,
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val_semer: f64,
    pub test_path: Option<PathBuf>,
    pub test_sha256: Option<String>,
}
