//! Versioned JSON checkpoints, written atomically.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::flow::{EbWeightConfig, ModelConfig, SvcModel};
use crate::nn::{OptimizerState, Params};
use crate::signal::MelConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Cpt,
    Sft,
    Rl,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Cpt => "cpt",
            Stage::Sft => "sft",
            Stage::Rl => "rl",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cpt" => Ok(Stage::Cpt),
            "sft" => Ok(Stage::Sft),
            "rl" => Ok(Stage::Rl),
            other => Err(Error::Config(format!("unknown stage `{other}` (expected cpt, sft, or rl)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub stage: Stage,
    /// Completed optimizer steps (or RL iterations) within `stage`.
    pub step: u64,
    pub mel: MelConfig,
    pub encoders: EncoderConfig,
    pub model_config: ModelConfig,
    pub eb: EbWeightConfig,
    pub model: SvcModel,
    pub optimizer: OptimizerState,
    /// Frozen policy the RL stage regularises towards.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<SvcModel>,
}

impl Checkpoint {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} (this build reads {FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.model.mel_bins() != self.mel.n_mels {
            return Err(Error::Checkpoint(format!(
                "model has {} mel bins but the mel config has {}",
                self.model.mel_bins(),
                self.mel.n_mels
            )));
        }
        if !self.model.all_finite() {
            return Err(Error::Checkpoint("non-finite parameters".into()));
        }
        let n = self.model.num_params();
        let opt_ok = |v: &Vec<f64>| v.is_empty() || v.len() == n;
        if !opt_ok(&self.optimizer.m) || !opt_ok(&self.optimizer.v) {
            return Err(Error::Checkpoint("optimizer state does not match the model".into()));
        }
        self.eb.validate(self.mel.n_mels).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        write_atomic(path, &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        ck.validate()?;
        Ok(ck)
    }
}

/// Write to a sibling temporary file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = crate::signal::wav::tmp_path(path);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
