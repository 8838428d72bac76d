//! Run configuration file. Every section is optional and falls back to its
//! defaults; unknown keys are rejected.

use std::path::Path;

use molpatch_core::dqt::DqtConfig;
use molpatch_core::nap::NapConfig;
use molpatch_core::objectives::{DqtTrainConfig, ObjectiveConfig};
use molpatch_core::patching::PatchParams;
use serde::{Deserialize, Serialize};

use crate::args::{Common, PatchFlags};
use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub nap: NapConfig,
    pub dqt: DqtConfig,
    pub dqt_train: DqtTrainConfig,
    pub patch: PatchParams,
    pub objectives: ObjectiveConfig,
    pub seed: u64,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Loads `--config` if given, then applies `--seed`.
    pub fn resolve(common: &Common) -> Result<Self, CliError> {
        let mut cfg = match &common.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }

    /// Applies `--delta`/`--gamma` and validates the result.
    pub fn patch_params(&self, flags: &PatchFlags) -> Result<PatchParams, CliError> {
        let mut p = self.patch;
        if let Some(d) = flags.delta {
            p.delta = d;
        }
        if let Some(g) = flags.gamma {
            p.gamma = g;
        }
        p.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(p)
    }
}
