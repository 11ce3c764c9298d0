//! Pipeline configuration file (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::EncoderConfig;
use crate::preprocess::TilingConfig;
use crate::selflearn::TrainConfig;
use crate::slide_score::ScoringConfig;
use crate::synth::SynthConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StainConfig {
    /// Reference image used when the command line gives none.
    pub reference: Option<PathBuf>,
}

/// Every section is optional and falls back to its defaults. `[student]`
/// also drives the global-assignment baseline.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub tiling: TilingConfig,
    pub stain: StainConfig,
    pub model: EncoderConfig,
    pub teacher: TrainConfig,
    pub student: TrainConfig,
    pub scoring: ScoringConfig,
    pub synth: SynthConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(format!(
            "{}: {}",
            origin.display(),
            e.message()
        )))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Validates every section, naming the failing one.
    pub fn validate(&self) -> Result<()> {
        let tag = |section: &str, r: Result<()>| {
            r.map_err(|e| match e {
                Error::InvalidConfig(m) => Error::InvalidConfig(format!("[{section}] {m}")),
                other => other,
            })
        };
        tag("tiling", self.tiling.validate())?;
        tag("model", self.model.validate())?;
        tag("teacher", self.teacher.validate())?;
        tag("student", self.student.validate())?;
        tag("scoring", self.scoring.validate())?;
        tag("synth", self.synth.validate())?;
        Ok(())
    }

    /// Applies one seed to every seeded stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.teacher.seed = seed;
        self.student.seed = seed;
        self.scoring.mlp.seed = seed;
        self.synth.seed = seed;
    }
}
