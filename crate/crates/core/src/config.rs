//! Whole-run configuration as stored in TOML and snapshotted into every
//! output directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::{Algo, TrainConfig, UpdateConfig};
use crate::baselines::Variant;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::segtrain::PretrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSection {
    pub frames: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { frames: 10_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RlSection {
    pub algo: Algo,
    pub total_env_steps: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub eval_seed: u64,
    pub checkpoint_every: u64,
    pub return_window: usize,
}

impl Default for RlSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            algo: t.algo,
            total_env_steps: t.total_env_steps,
            eval_every: t.eval_every,
            eval_episodes: t.eval_episodes,
            eval_seed: t.eval_seed,
            checkpoint_every: t.checkpoint_every,
            return_window: t.return_window,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VariantSpec {
    pub name: Variant,
    pub seg_checkpoint: Option<PathBuf>,
}

impl Default for VariantSpec {
    fn default() -> Self {
        Self {
            name: Variant::MorelJoint,
            seg_checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub env: EnvConfig,
    pub dataset: DatasetSection,
    pub pretrain: PretrainConfig,
    pub rl: RlSection,
    pub update: UpdateConfig,
    pub variant: VariantSpec,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config { field, reason } => Error::Config {
                field,
                reason: format!("{reason} (in {})", path.display()),
            },
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.pretrain.validate()?;
        self.update.validate()?;
        if self.dataset.frames < 2 {
            return Err(Error::config("dataset.frames", "must be at least 2"));
        }
        if self.rl.eval_episodes == 0 {
            return Err(Error::config("rl.eval_episodes", "must be at least 1"));
        }
        Ok(())
    }

    /// Training settings for one seed.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            env: self.env.clone(),
            algo: self.rl.algo,
            update: self.update.clone(),
            total_env_steps: self.rl.total_env_steps,
            seed,
            eval_every: self.rl.eval_every,
            eval_episodes: self.rl.eval_episodes,
            eval_seed: self.rl.eval_seed,
            checkpoint_every: self.rl.checkpoint_every,
            return_window: self.rl.return_window,
        }
    }
}
