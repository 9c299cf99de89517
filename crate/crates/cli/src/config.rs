//! The run configuration file and its content hash.
//!
//! Values resolve in the order command-line flag, then file, then the
//! defaults of the selected training preset.

use std::path::Path;

use cgrpo_core::curriculum::{CurriculumConfig, Strategy};
use cgrpo_core::difficulty::ScoringConfig;
use cgrpo_core::grpo::RewardWeights;
use cgrpo_core::synth::DatasetSpec;
use cgrpo_core::trainer::{Preset, RunSpec, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    /// Moving-average batch IoU that counts as reaching the threshold.
    pub iou_threshold: f64,
    /// Window of the moving average, in steps.
    pub window: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { seeds: vec![0, 1, 2], iou_threshold: 0.5, window: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    /// `total_steps` here is ignored in favour of `train.total_steps`.
    pub curriculum: CurriculumConfig,
    pub train: TrainConfig,
    pub reward: RewardWeights,
    pub scoring: ScoringConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::with_preset(Preset::Desk)
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub strategy: Option<Strategy>,
}

impl RunConfig {
    pub fn with_preset(preset: Preset) -> Self {
        let train = TrainConfig::preset(preset);
        let curriculum = CurriculumConfig { total_steps: train.total_steps, ..CurriculumConfig::default() };
        Self {
            dataset: DatasetSpec::default(),
            curriculum,
            train,
            reward: RewardWeights::default(),
            scoring: ScoringConfig::default(),
            ablation: AblationConfig::default(),
        }
    }

    /// Parses `text`, layering it over the preset it names (or the one in
    /// `overrides`), then applies the remaining overrides.
    pub fn parse(text: &str, overrides: &Overrides) -> Result<Self, CliError> {
        // strict pass for diagnostics with line numbers
        toml::from_str::<RunConfig>(text).map_err(|e| CliError::Config(format!("{e}")))?;
        let file: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(format!("{e}")))?;
        let file_preset = file
            .get("train")
            .and_then(|t| t.get("preset"))
            .and_then(|p| p.as_str())
            .map(|p| p.parse::<Preset>())
            .transpose()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if file.get("curriculum").and_then(|c| c.get("total_steps")).is_some() {
            return Err(CliError::Config("set train.total_steps instead of curriculum.total_steps".into()));
        }
        let preset = overrides.preset.or(file_preset).unwrap_or(Preset::Desk);
        let mut merged = toml::Table::try_from(Self::with_preset(preset))
            .map_err(|e| CliError::Config(format!("internal: {e}")))?;
        merge(&mut merged, file);
        let mut cfg: RunConfig =
            toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| CliError::Config(format!("{e}")))?;
        cfg.train.preset = preset;
        if let Some(seed) = overrides.seed {
            cfg.train.seed = seed;
        }
        if let Some(s) = overrides.strategy {
            cfg.curriculum.strategy = s;
        }
        cfg.curriculum.total_steps = cfg.train.total_steps;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, overrides).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Defaults of a preset when no file is given.
    pub fn from_overrides(overrides: &Overrides) -> Result<Self, CliError> {
        Self::parse("", overrides)
    }

    /// SHA-256 of the canonical JSON form (object keys sorted, shortest
    /// round-trip floats).
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("json value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn run_spec(&self) -> Result<RunSpec, CliError> {
        let spec = RunSpec {
            train: self.train.clone(),
            curriculum: self.curriculum.clone(),
            reward: self.reward,
            scoring: self.scoring,
            dataset: self.dataset.clone(),
            config_hash: self.hash(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// TOML text that parses back to `self`; `curriculum.total_steps` is
    /// left out since it follows `train.total_steps`.
    pub fn to_toml(&self) -> String {
        let mut t = toml::Table::try_from(self).expect("config serializes to toml");
        if let Some(toml::Value::Table(c)) = t.get_mut("curriculum") {
            c.remove("total_steps");
        }
        toml::to_string(&t).expect("config serializes to toml")
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
