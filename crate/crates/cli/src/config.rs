//! The run configuration document and its resolution against flags and
//! the environment.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use s2r_core::adapt::FineTuneSchedule;
use s2r_core::kernel_estim::EstimatorConfig;
use s2r_core::model::ModelConfig;
use s2r_core::train::TrainConfig;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "S2R_SEED";

/// File name of the resolved configuration written next to run artifacts.
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds every stochastic stage. `train.seed` is overwritten with it.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    pub paths: PathsConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub ensemble: bool,
    pub backprojection_iters: usize,
    pub residual_head: bool,
    pub schedule: FineTuneSchedule,
    pub estimator: EstimatorConfig,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            ensemble: true,
            backprojection_iters: 8,
            residual_head: false,
            schedule: FineTuneSchedule::default(),
            estimator: EstimatorConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub dataset: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
    pub outputs: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Reads `path`, or returns the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Applies the seed precedence flag > `S2R_SEED` > file and propagates
    /// the result to the training section.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Result<()> {
        if let Some(seed) = flag {
            self.seed = seed;
        } else if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = match v.trim().parse() {
                Ok(seed) => seed,
                Err(_) => bail!("{SEED_ENV}={v:?} is not an unsigned integer"),
            };
        }
        self.train.seed = self.seed;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Writes the fully materialized configuration into `dir`.
    pub fn persist(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(RESOLVED_CONFIG);
        std::fs::write(&path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
