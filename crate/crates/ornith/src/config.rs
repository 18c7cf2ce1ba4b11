//! Single structured run configuration: one TOML file with blocks for the
//! model, estimator, controller, simulation, and planner.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::EstimatorConfig;
use crate::gateplan::PlanConfig;
use crate::model::ModelParams;
use crate::mpcc::MpccConfig;
use crate::sim::SimConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelParams,
    pub estimator: EstimatorConfig,
    pub mpcc: MpccConfig,
    pub sim: SimConfig,
    pub plan: PlanConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }
}
