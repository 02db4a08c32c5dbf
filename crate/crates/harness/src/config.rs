//! Run configuration: the model's fields at top level plus data paths and
//! driver options.

use std::path::{Path, PathBuf};

use hyatt_core::bra::AttentionMode;
use hyatt_core::net::HyattConfig;
use serde::{Deserialize, Serialize};

use crate::error::{read_json, HarnessError, Result};

pub const SEED_ENV: &str = "HYATT_SEED";

pub fn default_thresholds() -> Vec<f64> {
    vec![2.0, 2.5, 3.0, 4.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub model: HyattConfig,
    /// Relative paths are resolved against the config file's directory.
    pub train_manifest: PathBuf,
    #[serde(default)]
    pub val_manifest: Option<PathBuf>,
    /// Stop after this many optimizer steps (overrides `epochs` when reached first).
    #[serde(default)]
    pub max_iterations: Option<usize>,
    #[serde(default = "default_thresholds")]
    pub sdr_thresholds: Vec<f64>,
    #[serde(default)]
    pub augment: bool,
    #[serde(default)]
    pub attention: AttentionMode,
}

impl RunConfig {
    pub fn new(model: HyattConfig, train_manifest: impl Into<PathBuf>) -> Self {
        Self {
            model,
            train_manifest: train_manifest.into(),
            val_manifest: None,
            max_iterations: None,
            sdr_thresholds: default_thresholds(),
            augment: false,
            attention: AttentionMode::Routed,
        }
    }

    /// Parse, resolve relative paths and validate.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: Self = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.train_manifest = base.join(&cfg.train_manifest);
        cfg.val_manifest = cfg.val_manifest.map(|p| base.join(p));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        validate_thresholds(&self.sdr_thresholds)?;
        if self.max_iterations == Some(0) {
            return Err(HarnessError::Config("max_iterations must be at least 1".into()));
        }
        Ok(())
    }

    /// Apply `HYATT_SEED` if set.
    pub fn apply_seed_env(&mut self) -> Result<()> {
        if let Some(seed) = seed_from_env()? {
            self.model.seed = seed;
        }
        Ok(())
    }
}

pub fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| HarnessError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

pub fn validate_thresholds(t: &[f64]) -> Result<()> {
    if t.is_empty() || t.iter().any(|v| !(*v > 0.0)) || t.windows(2).any(|w| w[0] >= w[1]) {
        return Err(HarnessError::Config(
            "sdr_thresholds must be positive and strictly ascending".into(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flattened_model_fields() {
        let text = r#"{"train_manifest": "data/manifest.json", "num_landmarks": 5, "decoder_dim": 32}"#;
        let cfg: RunConfig = serde_json::from_str(text).unwrap();
        assert_eq!(cfg.model.num_landmarks, 5);
        assert_eq!(cfg.model.decoder_dim, 32);
        assert_eq!(cfg.sdr_thresholds, default_thresholds());
        assert_eq!(cfg.attention, AttentionMode::Routed);
    }

    #[test]
    fn thresholds_must_ascend() {
        assert!(validate_thresholds(&[2.0, 2.0]).is_err());
        assert!(validate_thresholds(&[0.0]).is_err());
        validate_thresholds(&[1.0, 2.0]).unwrap();
    }
}
