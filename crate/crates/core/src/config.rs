//! Experiment configuration as flat `section.key = value` text.
//!
//! Files are TOML restricted to dotted keys, one per line:
//!
//! ```text
//! data.shift_strength = 0.8
//! train.variant = "full"
//! mmd.bandwidth = "median"
//! ```
//!
//! Missing keys take their defaults; unknown keys are rejected. The config hash is the
//! SHA-256 of the canonical rendering from [`ExperimentConfig::to_flat_text`], so two
//! files that differ only in ordering, comments, or omitted defaults hash equally.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::{LossWeights, MmdConfig};
use crate::datagen::SyntheticConfig;
use crate::error::{Error, Result};
use crate::interpret::AblationConfig;
use crate::model::ModelConfig;
use crate::probeval::{EvalConfig, ProbeConfig};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: SyntheticConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub mmd: MmdConfig,
    pub eval: EvalConfig,
    pub probe: ProbeConfig,
    pub interpret: AblationConfig,
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<String>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push(format!("{prefix} = {other}")),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            Error::Config(e.message().replace('\n', " "))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; the literal path `default` yields the built-in defaults.
    pub fn load(path: &Path) -> Result<Self> {
        if path.as_os_str() == "default" {
            return Ok(ExperimentConfig::default());
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model_config().validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.mmd.validate()?;
        self.interpret.validate()?;
        if self.eval.k == 0 {
            return Err(Error::Config("eval.k must be at least 1".into()));
        }
        if !(self.eval.threshold > 0.0 && self.eval.threshold < 1.0) {
            return Err(Error::Config("eval.threshold must lie in (0, 1)".into()));
        }
        if self.probe.steps == 0 || !(self.probe.learning_rate > 0.0) || !(self.probe.l2 >= 0.0) {
            return Err(Error::Config("probe settings must be positive".into()));
        }
        Ok(())
    }

    /// Model sizes with the vocabulary and label count taken from the data section.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { n_codes: self.data.n_codes, n_labels: self.data.n_labels, ..self.model.clone() }
    }

    /// Sets the data and training seeds together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Canonical rendering: every key, sorted, one `section.key = value` per line.
    pub fn to_flat_text(&self) -> String {
        let value = toml::Value::try_from(self).expect("config serializes to TOML");
        let mut lines = Vec::new();
        flatten("", &value, &mut lines);
        let mut text = lines.join("\n");
        text.push('\n');
        text
    }

    pub fn hash(&self) -> String {
        Sha256::digest(self.to_flat_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
