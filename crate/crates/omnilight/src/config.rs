//! JSON run configuration tying together model, training, and tiling
//! settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default = "default_tile")]
    pub tile: usize,
    #[serde(default = "default_overlap")]
    pub overlap: f64,
    #[serde(default)]
    pub input: Option<PathBuf>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

fn default_tile() -> usize {
    64
}

fn default_overlap() -> f64 {
    0.25
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: None,
            checkpoint: None,
            tile: default_tile(),
            overlap: default_overlap(),
            input: None,
            output: None,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(json: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            serde_json::from_str(json).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let json = std::fs::read_to_string(path)?;
        Self::from_json(&json)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if let Some(t) = &self.train {
            t.validate()?;
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Config(format!("overlap {} outside [0,1)", self.overlap)));
        }
        if self.tile == 0 || self.tile % self.model.spatial_divisor() != 0 {
            return Err(Error::Config(format!(
                "tile {} must be a positive multiple of {}",
                self.tile,
                self.model.spatial_divisor()
            )));
        }
        Ok(())
    }
}
