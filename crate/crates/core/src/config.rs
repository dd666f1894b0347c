//! The experiment config file: one JSON document driving every subcommand.
//!
//! Unknown keys are rejected everywhere so a misspelt hyperparameter fails
//! loudly instead of silently falling back to its default.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetConfig, Split};
use crate::eval::DECISION_THRESHOLD;
use crate::trainer::{TrainConfig, VariantPreset};
use crate::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Probability at or above which a patch is called cancer.
    pub decision_threshold: f64,
    /// Split scored by `eval` (clean labels).
    pub split: Split,
    /// Write one grayscale probability image per slide.
    pub write_masks: bool,
    /// Dataset directory, relative to the output root.
    pub dataset_dir: String,
    /// Run directories live under this directory of the output root.
    pub runs_dir: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            decision_threshold: DECISION_THRESHOLD,
            split: Split::Test,
            write_masks: true,
            dataset_dir: "dataset".into(),
            runs_dir: "runs".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    /// Master seed. Overrides `train.seed` and seeds dataset generation.
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 2020,
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(format!("config version {} (expected {CONFIG_VERSION})", self.version)));
        }
        self.dataset.validate()?;
        self.train.validate()?;
        let t = self.eval.decision_threshold;
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::config(format!("decision_threshold {t} outside (0, 1)")));
        }
        for (name, dir) in [("dataset_dir", &self.eval.dataset_dir), ("runs_dir", &self.eval.runs_dir)] {
            if dir.is_empty() || Path::new(dir).is_absolute() {
                return Err(Error::config(format!("{name} must be a non-empty relative path")));
            }
        }
        Ok(())
    }

    /// Replaces the seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }

    /// The train block with the master seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    pub fn variant(&self) -> VariantPreset {
        self.train.variant()
    }
}
