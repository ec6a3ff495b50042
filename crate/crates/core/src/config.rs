//! Run configuration shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::dsp::StftConfig;
use crate::error::{Error, Result};
use crate::inference::McemConfig;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

/// JSON run configuration. Omitted sections and keys take their defaults;
/// unknown keys are rejected.
///
/// ```
/// use univoice::config::RunConfig;
///
/// let cfg = RunConfig::from_json(r#"{"train": {"max_epochs": 3}}"#).unwrap();
/// assert_eq!(cfg.train.max_epochs, 3);
/// assert_eq!(cfg.model, Default::default());
/// assert!(RunConfig::from_json(r#"{"trian": {}}"#).is_err());
/// ```
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub stft: StftConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub mcem: McemConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.mcem.validate()?;
        self.synth.validate()?;
        if self.model.freq_bins != self.stft.freq_bins() {
            return Err(Error::InvalidConfig(format!(
                "model.freq_bins is {} but the STFT yields {} bins",
                self.model.freq_bins,
                self.stft.freq_bins()
            )));
        }
        if self.synth.stft != self.stft {
            return Err(Error::InvalidConfig(
                "synth.stft must match the top-level stft".into(),
            ));
        }
        Ok(())
    }

    /// Parses and validates.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Replaces every seed with `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.mcem.seed = seed;
        self.synth.seed = seed;
        self
    }
}
