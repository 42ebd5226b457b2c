//! Run configuration: a JSON document with model/norm/train/ada/data/eval
//! sections. Every field is optional and defaulted; unknown keys are
//! rejected, and the defaults-resolved document is echoed into the run
//! directory.

use normshift_core::augment::AdaConfig;
use normshift_core::model::ModelConfig;
use normshift_core::norms::NormSettings;
use normshift_core::trainer::TrainConfig;
use normshift_core::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub input: [usize; 3],
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub fc_widths: Vec<usize>,
    pub classes: usize,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::default();
        ModelSection {
            input: d.input,
            conv_channels: d.conv_channels,
            kernel: d.kernel,
            fc_widths: d.fc_widths,
            classes: d.classes,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaSection {
    pub enabled: bool,
    pub eta: f32,
    pub step_size: f32,
    pub inner_steps: usize,
    pub aug_rounds: usize,
    pub interval: usize,
    pub clip_min: f32,
    pub clip_max: f32,
}

impl Default for AdaSection {
    fn default() -> Self {
        let d = AdaConfig::default();
        AdaSection {
            enabled: false,
            eta: d.eta,
            step_size: d.step_size,
            inner_steps: d.inner_steps,
            aug_rounds: d.aug_rounds,
            interval: d.interval,
            clip_min: d.clip_min,
            clip_max: d.clip_max,
        }
    }
}

impl AdaSection {
    pub fn to_config(self) -> AdaConfig {
        AdaConfig {
            eta: self.eta,
            step_size: self.step_size,
            inner_steps: self.inner_steps,
            aug_rounds: self.aug_rounds,
            interval: self.interval,
            clip_min: self.clip_min,
            clip_max: self.clip_max,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub seed: u64,
    pub n_train: usize,
    pub classes: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { seed: 0, n_train: 5000, classes: 10 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub seed: u64,
    pub n: usize,
    pub batch: usize,
    pub run_id: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { seed: 1, n: 400, batch: 64, run_id: "run".into() }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub norm: NormSettings,
    pub train: TrainConfig,
    pub ada: AdaSection,
    pub data: DataSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input: self.model.input,
            conv_channels: self.model.conv_channels.clone(),
            kernel: self.model.kernel,
            fc_widths: self.model.fc_widths.clone(),
            classes: self.model.classes,
            norm: self.norm.clone(),
            seed: self.model.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        self.train.clone()
    }

    pub fn ada_config(&self) -> Option<AdaConfig> {
        self.ada.enabled.then(|| self.ada.to_config())
    }

    /// Defaults-resolved JSON echo for the run directory.
    pub fn resolved_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::format(format!("config echo: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_resolves_to_defaults() {
        let cfg = RunConfig::parse("{}").unwrap();
        assert_eq!(cfg.data.n_train, 5000);
        assert_eq!(cfg.train.batch_size, 32);
        assert!(!cfg.ada.enabled);
    }

    #[test]
    fn unknown_keys_are_named_in_the_error() {
        let err = RunConfig::parse(r#"{"normm": {}}"#).unwrap_err();
        assert!(err.to_string().contains("normm"), "{err}");
        let err = RunConfig::parse(r#"{"train": {"bathc_size": 4}}"#).unwrap_err();
        assert!(err.to_string().contains("bathc_size"), "{err}");
    }

    #[test]
    fn resolved_echo_round_trips() {
        let cfg = RunConfig::parse(r#"{"norm": {"kind": "asr"}, "train": {"epochs": 3}}"#).unwrap();
        let echo = cfg.resolved_json().unwrap();
        let back = RunConfig::parse(&echo).unwrap();
        assert_eq!(back.train.epochs, 3);
        assert_eq!(back.resolved_json().unwrap(), echo);
    }
}
