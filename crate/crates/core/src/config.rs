//! One TOML configuration file drives the whole pipeline. Every section is
//! optional and falls back to its module's defaults, so an empty file is a
//! valid (desk-scale) configuration. Precedence, lowest to highest: built-in
//! defaults < config file < `VLR_RUN_ROOT` (for the output root only) <
//! command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::infer::InferConfig;
use crate::model::ModelConfig;
use crate::render::RenderConfig;
use crate::train::TrainConfig;
use crate::vision::VisionConfig;
use crate::{Error, Result};

/// Dataset location and synthetic-generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub train_path: PathBuf,
    pub test_path: PathBuf,
    /// Sizes used by data generation.
    pub n_train: usize,
    pub n_test: usize,
    /// Reasoning-chain length range (inclusive) for generation.
    pub min_steps: usize,
    pub max_steps: usize,
    pub operand_max: i64,
    pub seed: u64,
    /// Samples split off the end of the training set for early stopping.
    pub holdout: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            train_path: PathBuf::from("data/train.jsonl"),
            test_path: PathBuf::from("data/test.jsonl"),
            n_train: 5000,
            n_test: 500,
            min_steps: 1,
            max_steps: 3,
            operand_max: 20,
            seed: 0,
            holdout: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_steps < 1 || self.min_steps > self.max_steps {
            return Err(Error::Config(format!(
                "steps range ({}, {}) is empty or starts at zero",
                self.min_steps, self.max_steps
            )));
        }
        if self.holdout >= self.n_train.max(1) {
            return Err(Error::Config(format!(
                "holdout {} must leave at least one training sample of {}",
                self.holdout, self.n_train
            )));
        }
        Ok(())
    }
}

/// Report assembly options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Seeds trained per suite row.
    pub seeds: Vec<u64>,
    /// Reports root, relative to the output root unless absolute.
    pub reports_dir: PathBuf,
    /// Also emit an accuracy chart per suite report.
    pub plot: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seeds: vec![0, 1, 2, 3, 4],
            reports_dir: PathBuf::from("reports"),
            plot: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("eval.seeds must not be empty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::Config("eval.seeds contains duplicates".into()));
        }
        Ok(())
    }
}

/// The full application configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    /// Run directories, caches, and (by default) reports live under here.
    pub out_root: PathBuf,
    pub corpus: CorpusConfig,
    pub render: RenderConfig,
    pub vision: VisionConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub eval: EvalConfig,
}

impl AppConfig {
    /// Parse a TOML file; any syntax or unknown-field problem is a
    /// configuration error.
    pub fn load(path: &Path) -> Result<AppConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("read {}: {e}", path.display())))?;
        let mut cfg: AppConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("parse {}: {e}", path.display())))?;
        if cfg.out_root.as_os_str().is_empty() {
            cfg.out_root = default_out_root();
        }
        Ok(cfg)
    }

    /// Cross-section consistency on top of each section's own checks. The
    /// model's vocabulary size is derived from data at run time, so it is
    /// deliberately not validated here.
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.render.validate()?;
        self.train.validate()?;
        self.infer.validate()?;
        self.eval.validate()?;
        if self.model.d_v != self.vision.d_v {
            return Err(Error::Config(format!(
                "model.d_v {} must equal vision.d_v {}",
                self.model.d_v, self.vision.d_v
            )));
        }
        Ok(())
    }

    /// The configuration as a JSON value, embedded into every artifact
    /// (cache manifest, checkpoint, training log, report) for traceability.
    pub fn echo(&self) -> Result<serde_json::Value> {
        serde_json::to_value(self).map_err(|e| Error::Config(format!("config echo: {e}")))
    }

    /// Reports root resolved against the output root.
    pub fn reports_root(&self) -> PathBuf {
        if self.eval.reports_dir.is_absolute() {
            self.eval.reports_dir.clone()
        } else {
            self.out_root.join(&self.eval.reports_dir)
        }
    }
}

fn default_out_root() -> PathBuf {
    PathBuf::from("out")
}

/// The output root after applying the environment override: `VLR_RUN_ROOT`
/// beats the config file; an explicit flag (handled by the caller) beats
/// both.
pub fn resolve_out_root(cfg: &AppConfig) -> PathBuf {
    match std::env::var_os("VLR_RUN_ROOT") {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => {
            if cfg.out_root.as_os_str().is_empty() {
                default_out_root()
            } else {
                cfg.out_root.clone()
            }
        }
    }
}
