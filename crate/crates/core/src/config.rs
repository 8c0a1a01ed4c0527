//! Run configuration: one JSON document covering model, training,
//! corruption, synthetic-data, and path settings.
//!
//! Every field has a default, so a config file only states what it changes.
//! Unknown keys are rejected at every level, and validation runs before any
//! computation. Derived quantities (embedding width, head width) are never
//! stored; they are recomputed from the fields here. A run has exactly one
//! seed, the top-level one; per-section seeds do not exist.

use crate::missingness::{Pattern, SyntheticSpec};
use crate::model::ModelConfig;
use crate::training::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Error, Debug)]
pub enum ConfigError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad config {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Corruption settings for the `corrupt` subcommand and evaluations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionConfig {
    pub pattern: Pattern,
    /// Target fraction of observed entries to hide.
    pub rate: f64,
    /// Steps per rectangle for the block pattern.
    pub block_len: usize,
    /// Features per rectangle for the block pattern.
    pub block_width: usize,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig { pattern: Pattern::Point, rate: 0.2, block_len: 6, block_width: 3 }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.rate > 0.0 && self.rate < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "corruption.rate must lie in (0, 1), got {}",
                self.rate
            )));
        }
        if self.block_len == 0 || self.block_width == 0 {
            return Err(ConfigError::Invalid("corruption block dims must be positive".into()));
        }
        Ok(())
    }
}

/// File locations; command-line flags override these.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Input series CSV.
    pub data: Option<PathBuf>,
    /// Station-coordinate sidecar CSV.
    pub coords: Option<PathBuf>,
    /// Output directory.
    pub out: Option<PathBuf>,
}

/// Everything a run needs. `model.n_features` is overwritten from the
/// dataset when training or generating, so configs rarely set it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed for every random stream in the run.
    pub seed: u64,
    /// Steps per training/evaluation window.
    pub t_window: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corruption: CorruptionConfig,
    pub synthetic: SyntheticSpec,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            t_window: 24,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            corruption: CorruptionConfig::default(),
            synthetic: SyntheticSpec::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.t_window == 0 {
            return Err(ConfigError::Invalid("t_window must be positive".into()));
        }
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.corruption.validate()?;
        self.synthetic.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Training config with the run seed threaded in.
    pub fn train_with_seed(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }
}

/// Reads and validates a config file.
pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let config: RunConfig = serde_json::from_str(&text).map_err(|e| ConfigError::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    #[test]
    fn defaults_round_trip_through_json() {
        let config = RunConfig::default();
        config.validate().unwrap();
        let json = serde_json::to_string_pretty(&config).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, config);
        // derived quantities are never stored
        assert!(!json.contains("d_e"));
        assert!(!json.contains("d_k"));
    }

    #[test]
    fn partial_config_fills_defaults() {
        let config: RunConfig =
            serde_json::from_str(r#"{"seed": 7, "model": {"d": 32}, "train": {"epochs": 5}}"#).unwrap();
        assert_eq!(config.seed, 7);
        assert_eq!(config.model.d, 32);
        assert_eq!(config.model.n_heads, 4, "untouched fields keep defaults");
        assert_eq!(config.train.epochs, 5);
        assert_eq!(config.train.patience, 10);
        assert_eq!(config.t_window, 24);
    }

    #[test]
    fn unknown_keys_are_rejected_everywhere() {
        for bad in [
            r#"{"mystery": 1}"#,
            r#"{"model": {"width": 8}}"#,
            r#"{"train": {"seed": 3}}"#,
            r#"{"corruption": {"ratio": 0.5}}"#,
            r#"{"synthetic": {"stations": 4}}"#,
            r#"{"paths": {"input": "x"}}"#,
        ] {
            assert!(serde_json::from_str::<RunConfig>(bad).is_err(), "accepted {}", bad);
        }
    }

    #[test]
    fn out_of_range_values_fail_validation() {
        let mut config = RunConfig::default();
        config.corruption.rate = 1.5;
        assert!(config.validate().is_err());

        let mut config = RunConfig::default();
        config.model.d = 15; // not divisible by 4 heads
        assert!(config.validate().is_err());

        let mut config = RunConfig::default();
        config.train.mask_ratio = 0.0;
        assert!(config.validate().is_err());

        let mut config = RunConfig::default();
        config.synthetic.length_scale = -1.0;
        assert!(config.validate().is_err());

        let mut config = RunConfig::default();
        config.t_window = 0;
        assert!(config.validate().is_err());
    }

    #[test]
    fn config_file_loading_reports_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");

        std::fs::write(&path, r#"{"seed": 3, "model": {"variant": "gated_fusion"}}"#).unwrap();
        let config = load_config(&path).unwrap();
        assert_eq!(config.seed, 3);
        assert_eq!(config.model.variant, Variant::GatedFusion);

        std::fs::write(&path, "{not json").unwrap();
        assert!(matches!(load_config(&path), Err(ConfigError::Json { .. })));

        assert!(matches!(
            load_config(&dir.path().join("absent.json")),
            Err(ConfigError::Io { .. })
        ));
    }

    #[test]
    fn run_seed_threads_into_training() {
        let mut config = RunConfig::default();
        config.seed = 41;
        assert_eq!(config.train.seed, 0, "section seed stays inert");
        assert_eq!(config.train_with_seed().seed, 41);
    }
}
