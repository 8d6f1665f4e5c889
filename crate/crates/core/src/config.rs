//! The run configuration file: one JSON object with a required `version`
//! and optional sections; unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::GenConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::inference::DecodeConfig;
use crate::training::TrainingConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    /// Overrides the data and training seeds when present.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub data: GenConfig,
    /// `vocab_size` is filled in from the vocabulary at training time.
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub decode: DecodeConfig,
    /// Tokens seen fewer times than this map to `[UNK]`.
    #[serde(default = "default_min_count")]
    pub vocab_min_count: usize,
}

fn default_min_count() -> usize {
    1
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: None,
            data: GenConfig::default(),
            encoder: EncoderConfig::default(),
            training: TrainingConfig::default(),
            decode: DecodeConfig::default(),
            vocab_min_count: 1,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.effective()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Applies the seed override and checks every section.
    pub fn effective(mut self) -> Result<Self> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if let Some(seed) = self.seed {
            self.data.seed = seed;
            self.training.seed = seed;
        }
        self.data.validate()?;
        self.training.validate()?;
        self.decode.validate()?;
        if self.vocab_min_count == 0 {
            return Err(Error::Config("vocab_min_count must be at least 1".into()));
        }
        let mut enc = self.encoder.clone();
        enc.vocab_size = enc.vocab_size.max(1);
        enc.validate()?;
        Ok(self)
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = RunConfig::from_json(r#"{"version": 1}"#).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.training.lr_peak, 4e-5);
        assert_eq!((cfg.encoder.layers, cfg.encoder.heads, cfg.encoder.hidden), (2, 4, 64));
    }

    #[test]
    fn version_is_required_and_checked() {
        assert!(matches!(RunConfig::from_json("{}"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json(r#"{"version": 2}"#), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            r#"{"version": 1, "epochs": 3}"#,
            r#"{"version": 1, "training": {"epoch": 3}}"#,
            r#"{"version": 1, "encoder": {"layer": 3}}"#,
            r#"{"version": 1, "data": {"passages": 3}}"#,
        ] {
            assert!(matches!(RunConfig::from_json(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn seed_override_and_round_trip() {
        let cfg = RunConfig::from_json(r#"{"version": 1, "seed": 99, "training": {"epochs": 2}}"#).unwrap();
        assert_eq!((cfg.data.seed, cfg.training.seed, cfg.training.epochs), (99, 99, 2));
        let again = RunConfig::from_json(&cfg.to_value().to_string()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn invalid_sections_are_config_errors() {
        let bad = [
            r#"{"version": 1, "training": {"warmup_fraction": 1.5}}"#,
            r#"{"version": 1, "encoder": {"hidden": 30, "heads": 4}}"#,
            r#"{"version": 1, "decode": {"tagger_threshold": 1.0}}"#,
            r#"{"version": 1, "data": {"fraction_unknown": 0.5}}"#,
        ];
        for text in bad {
            assert!(matches!(RunConfig::from_json(text), Err(Error::Config(_))), "{text}");
        }
    }
}
