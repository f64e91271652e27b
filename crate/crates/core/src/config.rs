//! Versioned TOML run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curvelet::CurveletConfig;
use crate::evaluation::FAILURE_THRESHOLD_RAD;
use crate::features::DetectorConfig;
use crate::matching::{MatcherConfig, RansacConfig};
use crate::pipeline::PipelineConfig;
use crate::range_image::{ProjectionModel, RangeLimits};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("unsupported config_version {found}, expected {CONFIG_VERSION}")]
    Version { found: u32 },
    #[error("invalid value for {key}: {message}")]
    Invalid { key: &'static str, message: String },
}

/// Projection in degrees, as written in configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectionDegrees {
    pub azimuth_span_deg: (f64, f64),
    pub elevation_span_deg: (f64, f64),
    pub azimuth_resolution_deg: f64,
    pub elevation_resolution_deg: f64,
}

impl Default for ProjectionDegrees {
    fn default() -> Self {
        Self {
            azimuth_span_deg: (-180.0, 180.0),
            elevation_span_deg: (-90.0, 90.0),
            azimuth_resolution_deg: 0.5,
            elevation_resolution_deg: 0.5,
        }
    }
}

impl ProjectionDegrees {
    pub fn model(&self) -> ProjectionModel {
        ProjectionModel::from_degrees(
            self.azimuth_span_deg,
            self.elevation_span_deg,
            self.azimuth_resolution_deg,
            self.elevation_resolution_deg,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSettings {
    /// Batch runs use scans `0, stride, 2·stride, …` and register each against the next.
    pub stride: usize,
    pub failure_threshold_rad: f64,
    /// Voxel size for the accumulated map; 0 keeps every point.
    pub map_voxel_m: f64,
}

impl Default for EvaluationSettings {
    fn default() -> Self {
        Self {
            stride: 1,
            failure_threshold_rad: FAILURE_THRESHOLD_RAD,
            map_voxel_m: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSettings {
    pub scans: usize,
    pub terrain_size_m: f64,
    pub noise_sigma_m: f64,
    pub sensor_height_m: f64,
    pub max_translation_m: f64,
    pub max_rotation_rad: f64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self {
            scans: 5,
            terrain_size_m: 120.0,
            noise_sigma_m: 0.02,
            sensor_height_m: 1.5,
            max_translation_m: 2.4,
            max_rotation_rad: 0.45,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub config_version: u32,
    pub projection: ProjectionDegrees,
    pub limits: RangeLimits,
    pub curvelet: CurveletConfig,
    pub detector: DetectorConfig,
    pub matcher: MatcherConfig,
    pub ransac: RansacConfig,
    pub evaluation: EvaluationSettings,
    pub synth: SynthSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            config_version: CONFIG_VERSION,
            projection: ProjectionDegrees::default(),
            limits: RangeLimits::default(),
            curvelet: CurveletConfig::default(),
            detector: DetectorConfig::default(),
            matcher: MatcherConfig::default(),
            ransac: RansacConfig::default(),
            evaluation: EvaluationSettings::default(),
            synth: SynthSettings::default(),
        }
    }
}

fn invalid(key: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key,
        message: message.into(),
    }
}

impl RunConfig {
    /// Parses and validates a configuration. `config_version` is required;
    /// every other key falls back to its default.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let table: toml::Table = toml::from_str(text)?;
        if !table.contains_key("config_version") {
            return Err(invalid("config_version", "missing"));
        }
        let cfg: RunConfig = table.try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn pipeline(&self, rng_seed: u64) -> PipelineConfig {
        PipelineConfig {
            projection: self.projection.model(),
            limits: self.limits,
            curvelet: self.curvelet,
            detector: self.detector,
            matcher: self.matcher,
            ransac: self.ransac,
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.config_version != CONFIG_VERSION {
            return Err(ConfigError::Version {
                found: self.config_version,
            });
        }
        self.pipeline(0)
            .validate()
            .map_err(|e| invalid("pipeline", e.to_string()))?;
        let d = &self.detector;
        if !(d.contrast_threshold >= 0.0 && d.contrast_threshold.is_finite()) {
            return Err(invalid(
                "detector.contrast_threshold",
                "must be finite and ≥ 0",
            ));
        }
        if !(d.range_margin >= 0.0 && d.range_margin.is_finite()) {
            return Err(invalid("detector.range_margin", "must be finite and ≥ 0"));
        }
        let e = &self.evaluation;
        if e.stride < 1 {
            return Err(invalid("evaluation.stride", "must be ≥ 1"));
        }
        if !(e.failure_threshold_rad > 0.0) {
            return Err(invalid("evaluation.failure_threshold_rad", "must be > 0"));
        }
        if !(e.map_voxel_m >= 0.0) {
            return Err(invalid("evaluation.map_voxel_m", "must be ≥ 0"));
        }
        let s = &self.synth;
        if s.scans < 2 {
            return Err(invalid("synth.scans", "must be ≥ 2"));
        }
        if !(s.terrain_size_m > 0.0) {
            return Err(invalid("synth.terrain_size_m", "must be > 0"));
        }
        if !(s.noise_sigma_m >= 0.0) {
            return Err(invalid("synth.noise_sigma_m", "must be ≥ 0"));
        }
        if !(s.sensor_height_m > 0.0) {
            return Err(invalid("synth.sensor_height_m", "must be > 0"));
        }
        if !(s.max_translation_m > 0.0 && s.max_rotation_rad >= 0.0) {
            return Err(invalid(
                "synth.max_translation_m",
                "step bounds must be positive",
            ));
        }
        Ok(())
    }
}
