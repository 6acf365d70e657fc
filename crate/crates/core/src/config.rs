//! Run configuration: every hyperparameter of the pipeline in one TOML file.
//!
//! Missing keys take their defaults, so a file only needs the values it
//! changes. Component seeds are not stored; they are derived from `seed`
//! through the named streams in [`crate::rng`].

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::BuildConfig;
use crate::embeddings::EmbeddingConfig;
use crate::error::{Error, Result};
use crate::matcher::MatcherConfig;
use crate::rng;
use crate::trainer::TrainConfig;

/// File name of the frozen copy written into output directories.
pub const FROZEN_NAME: &str = "run_config.toml";

pub const DEFAULT_MAX_NEIGHBORS: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    /// Reference triples per test relation; scores are max-fused when > 1.
    pub shots: usize,
    /// Drop other known tails of the query head from the candidates.
    pub filtered: bool,
    pub workers: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            shots: 1,
            filtered: false,
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub input: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub table: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub max_neighbors: usize,
    pub dataset: BuildConfig,
    pub embedding: EmbeddingConfig,
    pub matcher: MatcherConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            max_neighbors: DEFAULT_MAX_NEIGHBORS,
            dataset: BuildConfig::default(),
            embedding: EmbeddingConfig::default(),
            matcher: MatcherConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSettings::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg.resolved())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Fills the component seeds from the master seed.
    pub fn resolved(mut self) -> Self {
        self.dataset.seed = rng::derive_seed(self.seed, rng::DATASET);
        self.embedding.seed = rng::derive_seed(self.seed, rng::EMBEDDING);
        self.train.seed = self.seed;
        self
    }

    /// Seed for matcher parameter initialisation.
    pub fn matcher_seed(&self) -> u64 {
        rng::derive_seed(self.seed, rng::MATCHER)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!("seed must be at most {}", i64::MAX)));
        }
        if self.max_neighbors == 0 {
            return Err(Error::Config("max_neighbors must be positive".into()));
        }
        if self.dataset.band_lo >= self.dataset.band_hi {
            return Err(Error::Config("dataset band must satisfy lo < hi".into()));
        }
        if self.eval.shots == 0 || self.eval.workers == 0 {
            return Err(Error::Config("eval shots and workers must be positive".into()));
        }
        self.embedding.validate()?;
        self.matcher.validate()?;
        self.train.validate()
    }

    /// Writes `run_config.toml` into `dir`.
    pub fn write_frozen(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let path = dir.join(FROZEN_NAME);
        fs::write(&path, self.to_toml()?).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(path)
    }
}
