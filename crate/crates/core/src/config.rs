//! Run configuration: one TOML file, strict keys, environment overrides.
//!
//! Any key can be overridden with `FLOWSVC__<SECTION>__<KEY>=<value>`
//! (double underscores separate path components, names are lower-cased).
//! Values are parsed as TOML literals and fall back to plain strings, so
//! `FLOWSVC__RL__BETA=0.05` and `FLOWSVC__PATHS__CORPUS=data/toy` both work.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::SftConfig;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::flow::{EbWeightConfig, ModelConfig, TrainConfig};
use crate::nn::{LrSchedule, OptimizerConfig};
use crate::rl::RlConfig;
use crate::sampler::SamplerConfig;
use crate::signal::MelConfig;

pub const ENV_PREFIX: &str = "FLOWSVC__";

/// External programs behind the plugin boundaries. Each is an argv list.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PluginConfig {
    pub separator: Option<Vec<String>>,
    pub shifter: Option<Vec<String>>,
    pub shifter_speakers: usize,
    pub aesthetic: Option<Vec<String>>,
    /// Declared raw score range of the aesthetic scorer.
    pub aesthetic_range: (f64, f64),
    pub transcriber: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub corpus: PathBuf,
    pub checkpoints: PathBuf,
    pub runs: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            corpus: "data/corpus".into(),
            checkpoints: "checkpoints".into(),
            runs: "runs".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Reference frames placed before the source as an observed prompt.
    pub prefix_frames: usize,
    pub griffin_lim_iters: usize,
    pub gamma_inst: f64,
    pub noise_seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            prefix_frames: 0,
            griffin_lim_iters: 32,
            gamma_inst: 1.0,
            noise_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub mel: MelConfig,
    pub encoders: EncoderConfig,
    pub model: ModelConfig,
    pub eb: EbWeightConfig,
    pub cpt: TrainConfig,
    pub sft: TrainConfig,
    pub augment: SftConfig,
    pub sampler: SamplerConfig,
    pub rl: RlConfig,
    pub inference: InferenceConfig,
    pub paths: PathsConfig,
    pub plugins: PluginConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mel: MelConfig::default(),
            encoders: EncoderConfig::default(),
            model: ModelConfig::default(),
            eb: EbWeightConfig::default(),
            cpt: TrainConfig::default(),
            sft: TrainConfig {
                steps: 15_000,
                optimizer: OptimizerConfig {
                    schedule: LrSchedule {
                        decay_steps: 15_000,
                        ..LrSchedule::default()
                    },
                    ..OptimizerConfig::default()
                },
                ..TrainConfig::default()
            },
            augment: SftConfig::default(),
            sampler: SamplerConfig::default(),
            rl: RlConfig::default(),
            inference: InferenceConfig::default(),
            paths: PathsConfig::default(),
            plugins: PluginConfig {
                aesthetic_range: (1.0, 10.0),
                shifter_speakers: 120,
                ..Default::default()
            },
        }
    }
}

fn parse_env_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
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

fn set_path(root: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut table = root;
    for key in parents {
        let entry = table
            .entry(key.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path crosses non-table key `{key}`")))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

impl RunConfig {
    /// Parse TOML text, applying `overrides` (`(key path, raw value)`).
    pub fn from_toml_with(text: &str, overrides: &[(Vec<String>, String)]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for (path, raw) in overrides {
            if path.is_empty() {
                return Err(Error::Config("empty override key".into()));
            }
            set_path(&mut table, path, parse_env_value(raw))?;
        }
        // Layer the file over the full default tree so a partial section
        // (say `[sft]` with only `batch_size`) keeps that section's own
        // defaults rather than the generic ones of its type.
        let mut merged = toml::Table::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, table);
        let cfg: RunConfig = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    /// Overrides found in the process environment.
    pub fn env_overrides() -> Vec<(Vec<String>, String)> {
        let mut out: Vec<_> = std::env::vars()
            .filter_map(|(k, v)| {
                let rest = k.strip_prefix(ENV_PREFIX)?;
                let path: Vec<String> = rest.split("__").map(str::to_lowercase).collect();
                (!path.iter().any(String::is_empty)).then_some((path, v))
            })
            .collect();
        out.sort();
        out
    }

    /// Load a file (or defaults when `path` is `None`) plus environment
    /// overrides.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_with(&text, &Self::env_overrides())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.mel.validate()?;
        self.eb.validate(self.mel.n_mels)?;
        self.augment.validate()?;
        self.sampler.validate()?;
        self.rl.validate()?;
        if self.cpt.batch_size == 0 || self.sft.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.model.alpha_tau) {
            return Err(Error::Config(format!("alpha_tau {} outside [0, 1]", self.model.alpha_tau)));
        }
        if self.plugins.aesthetic_range.1 <= self.plugins.aesthetic_range.0 {
            return Err(Error::Config("aesthetic_range must be increasing".into()));
        }
        Ok(())
    }

    /// Resolve relative paths against `base` (usually the config file's
    /// directory).
    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.paths.corpus, &mut self.paths.checkpoints, &mut self.paths.runs] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}
