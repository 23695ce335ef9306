//! Training and evaluation harness: optimizer, subject-disjoint folds,
//! metrics, and experiment orchestration, plus the flat key=value
//! experiment configuration shared by the command-line tools.

mod folds;
mod metrics;
mod optim;
mod train;

pub use folds::{make_folds, FoldPlan};
pub use metrics::ConfusionMatrix;
pub use optim::{adamw_update, OptimizerConfig, OptimizerState};
pub use train::{
    check_model_gradients, cross_validate, evaluate, report_parameters, train_fold, CvOutcome,
    EpochMetrics, GradCheckReport, SplitResult, TrainOutcome,
};

use crate::encoder::ModelConfig;
use crate::error::Error;
use crate::pipeline::AugmentationConfig;
use crate::Result;
use std::path::Path;

/// Everything a training run depends on, with a flat key=value file format.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub augment: AugmentationConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// First epoch (1-based) at which relabeling runs.
    pub sf_start_epoch: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            augment: AugmentationConfig::default(),
            batch_size: 16,
            epochs: 130,
            sf_start_epoch: 20,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut collect = |r: Result<()>| {
            if let Err(Error::Config { problems: p }) = r {
                problems.extend(p);
            } else if let Err(other) = r {
                problems.push(other.to_string());
            }
        };
        collect(self.model.validate());
        collect(self.optimizer.validate());
        collect(self.augment.validate());
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".into());
        }
        if self.sf_start_epoch == 0 {
            problems.push("sf_start_epoch counts epochs from 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config { problems })
        }
    }

    /// Snapshot as key=value lines, the inverse of [`ExperimentConfig::apply_kv`].
    pub fn to_kv_lines(&self) -> String {
        let mut lines = self.model.to_kv_lines();
        lines.push(format!("learning_rate = {}", self.optimizer.learning_rate));
        lines.push(format!("beta1 = {}", self.optimizer.beta1));
        lines.push(format!("beta2 = {}", self.optimizer.beta2));
        lines.push(format!("weight_decay = {}", self.optimizer.weight_decay));
        lines.push(format!("adam_epsilon = {}", self.optimizer.epsilon));
        lines.push(format!("batch_size = {}", self.batch_size));
        lines.push(format!("epochs = {}", self.epochs));
        lines.push(format!("sf_start_epoch = {}", self.sf_start_epoch));
        lines.push(format!("seed = {}", self.seed));
        lines.push(format!("augment_enabled = {}", self.augment.enabled));
        lines.push(format!("flip_probability = {}", self.augment.flip_probability));
        lines.push(format!("erase_probability = {}", self.augment.erase_probability));
        lines.push(format!("erase_area_min = {}", self.augment.erase_area.0));
        lines.push(format!("erase_area_max = {}", self.augment.erase_area.1));
        lines.push(format!("jitter_strength = {}", self.augment.jitter_strength));
        lines.join("\n") + "\n"
    }

    /// Apply one key=value pair; unknown keys are errors.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        if self.model.apply_kv(key, value)? {
            return Ok(());
        }
        let bad = |key: &str, value: &str| Error::Config {
            problems: vec![format!("cannot parse {key} = '{value}'")],
        };
        match key {
            "learning_rate" => {
                self.optimizer.learning_rate = value.parse().map_err(|_| bad(key, value))?
            }
            "beta1" => self.optimizer.beta1 = value.parse().map_err(|_| bad(key, value))?,
            "beta2" => self.optimizer.beta2 = value.parse().map_err(|_| bad(key, value))?,
            "weight_decay" => {
                self.optimizer.weight_decay = value.parse().map_err(|_| bad(key, value))?
            }
            "adam_epsilon" => {
                self.optimizer.epsilon = value.parse().map_err(|_| bad(key, value))?
            }
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad(key, value))?,
            "epochs" => self.epochs = value.parse().map_err(|_| bad(key, value))?,
            "sf_start_epoch" => {
                self.sf_start_epoch = value.parse().map_err(|_| bad(key, value))?
            }
            "seed" => self.seed = value.parse().map_err(|_| bad(key, value))?,
            "augment_enabled" => {
                self.augment.enabled = value.parse().map_err(|_| bad(key, value))?
            }
            "flip_probability" => {
                self.augment.flip_probability = value.parse().map_err(|_| bad(key, value))?
            }
            "erase_probability" => {
                self.augment.erase_probability = value.parse().map_err(|_| bad(key, value))?
            }
            "erase_area_min" => {
                self.augment.erase_area.0 = value.parse().map_err(|_| bad(key, value))?
            }
            "erase_area_max" => {
                self.augment.erase_area.1 = value.parse().map_err(|_| bad(key, value))?
            }
            "jitter_strength" => {
                self.augment.jitter_strength = value.parse().map_err(|_| bad(key, value))?
            }
            _ => {
                return Err(Error::Config {
                    problems: vec![format!("unknown key '{key}'")],
                })
            }
        }
        Ok(())
    }

    /// Parse a config file over the defaults, reporting every offending
    /// line at once, then validate the result.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display(), e))?;
        let mut config = ExperimentConfig::default();
        let mut problems = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                problems.push(format!("line {}: expected key = value", i + 1));
                continue;
            };
            if let Err(e) = config.apply_kv(key.trim(), value.trim()) {
                match e {
                    Error::Config { problems: p } => {
                        problems.extend(p.into_iter().map(|m| format!("line {}: {m}", i + 1)))
                    }
                    other => problems.push(format!("line {}: {other}", i + 1)),
                }
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config { problems });
        }
        config.validate()?;
        Ok(config)
    }

    /// Apply command-line overrides on top of the file, all-or-nothing.
    pub fn apply_overrides(&mut self, pairs: &[(String, String)]) -> Result<()> {
        let mut problems = Vec::new();
        for (key, value) in pairs {
            if let Err(e) = self.apply_kv(key, value) {
                match e {
                    Error::Config { problems: p } => problems.extend(p),
                    other => problems.push(other.to_string()),
                }
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config { problems });
        }
        self.validate()
    }
}
