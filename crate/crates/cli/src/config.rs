//! Experiment configuration file: JSON defaults that command-line flags
//! override.

use isnet_core::loss::LossConfig;
use isnet_core::lrp::LrpConfig;
use isnet_core::train::TrainConfig;
use isnet_core::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Option<String>,
    pub lrp: Option<LrpConfig>,
    pub loss: Option<LossConfig>,
    pub train: Option<TrainConfig>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
        Ok(cfg)
    }
}
