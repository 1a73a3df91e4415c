//! Global JSON configuration. Every field is optional; omitted ones take
//! their module defaults.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::AugmentPolicy;
use crate::service::StoreConfig;
use crate::soxai::TsneParams;
use crate::triage::TriageThresholds;
use crate::trust::TrustParams;
use crate::xai::XaiParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub thresholds: TriageThresholds,
    /// Decision threshold for the accuracy / overkill / escape table.
    pub eval_threshold: f64,
    pub xai: XaiParams,
    pub tsne: TsneParams,
    pub trust: TrustParams,
    pub augment: AugmentPolicy,
    pub service: StoreConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            thresholds: TriageThresholds::default(),
            eval_threshold: 0.5,
            xai: XaiParams::default(),
            tsne: TsneParams::default(),
            trust: TrustParams::default(),
            augment: AugmentPolicy::default(),
            service: StoreConfig::default(),
        }
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Config> {
        let cfg: Config = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Config> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eval_threshold) {
            return Err(Error::param(format!(
                "eval_threshold must be in [0, 1], got {}",
                self.eval_threshold
            )));
        }
        if self.xai.grid == 0 || self.xai.subdivide == 0 {
            return Err(Error::param("xai grid and subdivide must be positive"));
        }
        if !(self.xai.rho > 0.0 && self.xai.rho <= 1.0) {
            return Err(Error::param(format!("xai rho must be in (0, 1], got {}", self.xai.rho)));
        }
        self.tsne.validate()?;
        self.augment.validate()?;
        Ok(())
    }
}
