use std::path::PathBuf;

use selab_core::analysis::CompareConfig;
use selab_core::selectors::Strategy;
use selab_core::tasks::{SplitConfig, SynthConfig};
use selab_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// Which trained parameters the evaluation stages load.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Best,
    Final,
}

impl CheckpointKind {
    pub fn name(self) -> &'static str {
        match self {
            CheckpointKind::Best => "best",
            CheckpointKind::Final => "final",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub strategies: Vec<Strategy>,
    pub k: Vec<usize>,
    pub checkpoint: CheckpointKind,
    /// Top-K logits instead of sampling for trainable strategies.
    pub greedy: bool,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            strategies: Strategy::ALL.to_vec(),
            k: vec![5, 10, 20, 40],
            checkpoint: CheckpointKind::Best,
            greedy: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeSection {
    /// Budgets whose selections are profiled.
    pub k: Vec<usize>,
    /// Add a second random selector with its own seed as a control.
    pub control: bool,
    pub bootstrap_resamples: usize,
    pub confidence: f64,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        let c = CompareConfig::default();
        Self {
            k: vec![10],
            control: true,
            bootstrap_resamples: c.bootstrap_resamples,
            confidence: c.confidence,
        }
    }
}

/// Everything an experiment depends on. `seed` is required; the output
/// directory is a location, not a setting, and is left out of the hash.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default, skip_serializing)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub evaluate: EvaluateSection,
    #[serde(default)]
    pub analyze: AnalyzeSection,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("{origin}: {e}")))
    }

    /// Hex SHA-256 of the canonical JSON of the effective settings.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        if self.evaluate.k.is_empty() || self.evaluate.k.contains(&0) {
            return Err(CliError::Config("evaluate.k must list positive budgets".into()));
        }
        if self.evaluate.strategies.is_empty() {
            return Err(CliError::Config("evaluate.strategies is empty".into()));
        }
        if self.analyze.k.iter().any(|&k| k < 2) {
            return Err(CliError::Config("analyze.k budgets must be at least 2".into()));
        }
        if self.analyze.bootstrap_resamples == 0 || !(self.analyze.confidence > 0.0 && self.analyze.confidence < 1.0) {
            return Err(CliError::Config(
                "analyze needs bootstrap_resamples > 0 and confidence in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}
