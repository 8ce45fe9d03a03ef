//! Hyperparameters of the prototype memory, loaded from JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::losses::MarginLoss as LossConfig;

/// Prototype memory hyperparameters.
///
/// The JSON keys follow the usual short names: `D` (embedding size), `M`
/// (memory capacity), `k` (images per class group), `r` (refresh ratio),
/// `h` (hardness ratio), `loss` and `seed`. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PmConfig {
    #[serde(rename = "D")]
    pub dim: usize,
    #[serde(rename = "M")]
    pub memory_size: usize,
    #[serde(rename = "k")]
    pub group_size: usize,
    #[serde(rename = "r")]
    pub refresh_ratio: f64,
    pub loss: LossConfig,
    #[serde(rename = "h", default)]
    pub hardness_ratio: f64,
    #[serde(default)]
    pub seed: u64,
}

impl PmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("D must be positive".into()));
        }
        if self.memory_size == 0 {
            return Err(Error::Config("M must be positive".into()));
        }
        if self.group_size < 2 {
            return Err(Error::Config(format!(
                "k must be at least 2, got {}",
                self.group_size
            )));
        }
        check_unit_interval("r", self.refresh_ratio)?;
        check_unit_interval("h", self.hardness_ratio)?;
        self.loss.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PmConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub(crate) fn check_unit_interval(name: &str, value: f64) -> Result<()> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{name} must lie in [0, 1], got {value}"
        )))
    }
}
