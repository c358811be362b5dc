//! Experiment configuration file.

use std::path::Path;

use anyhow::{Context, Result};
use lfsl_core::eval::EvalConfig;
use lfsl_core::model::{ArchSpec, NovelPolicy};
use lfsl_core::synthgen::WorldSpec;
use lfsl_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    /// Shots per novel class.
    pub k: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig { k: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub thetas: Vec<f64>,
    /// Fine-tuning setting used for every θ.
    pub setting: u8,
    /// Settings run by `settings-matrix`, after the baseline row.
    pub matrix_settings: Vec<u8>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            thetas: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            setting: 9,
            matrix_settings: (2..=9).collect(),
        }
    }
}

/// Every knob of one experiment. `seed` is the single master seed; it is
/// copied into each component, which derives its own labelled streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Table IV split: 1 merged into base heads, 2 one shared novel head,
    /// 3 one head per novel class.
    pub split_strategy: u8,
    pub world: WorldSpec,
    pub arch: ArchSpec,
    pub base: TrainConfig,
    pub finetune: TrainConfig,
    pub episode: EpisodeConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            split_strategy: 3,
            world: WorldSpec::default(),
            arch: ArchSpec::default(),
            base: TrainConfig::base(0),
            finetune: TrainConfig::finetune(7, 0),
            episode: EpisodeConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

pub fn policy_for(split: u8) -> Result<NovelPolicy> {
    match split {
        1 => Ok(NovelPolicy::MergedIntoBase),
        2 => Ok(NovelPolicy::SingleHead),
        3 => Ok(NovelPolicy::PerClass),
        other => anyhow::bail!("unknown split strategy {other} (expected 1, 2 or 3)"),
    }
}

impl ExperimentConfig {
    /// Reads a config file layered over the defaults: tables merge key by
    /// key, any other value (arrays included) replaces the default.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Value = toml::from_str(text)?;
        let mut merged = toml::Value::try_from(ExperimentConfig::default())?;
        merge(&mut merged, user);
        Ok(merged.try_into()?)
    }

    /// Propagates the master seed into every component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.world.seed = seed;
        self.base.seed = seed;
        self.finetune.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.arch.validate()?;
        self.base.validate()?;
        self.finetune.validate()?;
        self.eval.validate()?;
        policy_for(self.split_strategy)?;
        anyhow::ensure!(self.episode.k > 0, "episode k must be positive");
        anyhow::ensure!(self.base.grid == self.finetune.grid, "base and fine-tuning grids differ");
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
