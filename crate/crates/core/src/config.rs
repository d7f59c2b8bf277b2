//! The JSON run configuration read by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{Frontend, FrontendConfig};
use crate::model::ModelConfig;
use crate::synth::SynthConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Where `extract` writes and `cv`/`train` look for feature files.
    /// Relative paths are taken from the manifest's directory; `None` means
    /// `<manifest dir>/features`.
    pub features_dir: Option<PathBuf>,
    /// Parent of the per-run output directories.
    pub runs_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { features_dir: None, runs_dir: PathBuf::from("runs") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub frontend: FrontendConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub folds: usize,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            frontend: FrontendConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            folds: 5,
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates; unknown keys anywhere are an error.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let cfg: Self = serde_json::from_str(&text).map_err(|source| ConfigError::Parse { path: path.to_path_buf(), source })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        Frontend::new(self.frontend).map_err(|e| inv(&e))?;
        self.model.validate().map_err(|e| inv(&e))?;
        self.train.validate().map_err(|e| inv(&e))?;
        self.synth.validate().map_err(|e| inv(&e))?;
        if self.frontend.mel.n_mels != self.model.n_mels {
            return Err(ConfigError::Invalid(format!(
                "frontend produces {} mel bands but the model expects {}",
                self.frontend.mel.n_mels, self.model.n_mels
            )));
        }
        if self.folds < 2 {
            return Err(ConfigError::Invalid(format!("folds must be at least 2, got {}", self.folds)));
        }
        Ok(())
    }

    /// Every field written out, defaults included.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected_at_any_depth() {
        for doc in [r#"{"trian": {}}"#, r#"{"train": {"lr": 1e-4, "momentum": 0.9}}"#, r#"{"frontend": {"mel": {"bands": 40}}}"#] {
            assert!(serde_json::from_str::<RunConfig>(doc).is_err(), "{doc}");
        }
    }

    #[test]
    fn resolved_dump_round_trips() {
        let cfg: RunConfig = serde_json::from_str(r#"{"train": {"lr": 1e-4}, "folds": 3}"#).unwrap();
        let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert!(cfg.to_json().contains("\"n_mels\": 64"));
    }

    #[test]
    fn cross_field_checks() {
        let mut cfg = RunConfig::default();
        cfg.model.n_mels = 40;
        assert!(cfg.validate().is_err());
        let cfg = RunConfig { folds: 1, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn load_reports_parse_errors_with_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, "{\"folds\": }").unwrap();
        let err = RunConfig::load(&p).unwrap_err();
        assert!(matches!(err, ConfigError::Parse { .. }));
        assert!(err.to_string().contains("c.json"));
    }
}
