//! Pipeline configuration: one YAML file carrying every module's parameters.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imu::ImuNoiseModel;
use crate::radar::RobustSolveConfig;
use crate::smoother::WindowConfig;

/// Static-initialization parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    /// Length of each of the two consecutive initialization windows [s].
    pub window_sec: f64,
    /// Accel variance above which the window counts as moving [(m/s²)²].
    pub accel_var_threshold: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            window_sec: 1.0,
            accel_var_threshold: 0.05,
        }
    }
}

/// Top-level configuration with the documented defaults for every module.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub radar: RobustSolveConfig,
    pub imu: ImuNoiseModel,
    pub init: InitConfig,
    pub smoother: WindowConfig,
    /// Skip the ‖g‖ ∈ [9.7, 9.9] sanity check.
    pub allow_nonstandard_gravity: bool,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl PipelineConfig {
    pub fn from_yaml_str(text: &str) -> Result<Self, ConfigError> {
        let config: PipelineConfig =
            serde_yaml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_yaml_str(&text)
    }

    pub fn to_yaml_string(&self) -> String {
        serde_yaml::to_string(self).expect("config serialization is infallible")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.imu
            .validate(self.allow_nonstandard_gravity)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.radar.doppler_sigma <= 0.0 {
            return Err(ConfigError::Invalid("doppler_sigma must be positive".into()));
        }
        if self.smoother.lag <= 0.0 {
            return Err(ConfigError::Invalid("smoother lag must be positive".into()));
        }
        if self.init.window_sec <= 0.0 || self.init.accel_var_threshold <= 0.0 {
            return Err(ConfigError::Invalid(
                "init window and threshold must be positive".into(),
            ));
        }
        Ok(())
    }
}
