//! The single JSON configuration shared by every command.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::{Manifest, SynthConfig};
use crate::tensor_core::GradCheckConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Training seeds; every configuration is trained once per seed.
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { seeds: vec![0, 1, 2] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradSuiteConfig {
    pub seeds: Vec<u64>,
    pub h: f64,
    pub tol: f64,
    pub floor: f64,
}

impl Default for GradSuiteConfig {
    fn default() -> Self {
        let c = GradCheckConfig::default();
        GradSuiteConfig {
            seeds: (0..10).collect(),
            h: c.h,
            tol: c.tol,
            floor: c.floor,
        }
    }
}

impl GradSuiteConfig {
    pub fn check(&self) -> GradCheckConfig {
        GradCheckConfig {
            h: self.h,
            tol: self.tol,
            floor: self.floor,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub ablation: AblationConfig,
    pub gradcheck: GradSuiteConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("line {}: {e}", e.line())))
    }

    /// Reads a config file; a missing file is an I/O error, bad contents a
    /// configuration error.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        if self.ablation.seeds.is_empty() {
            return Err(Error::Config("ablation.seeds is empty".into()));
        }
        let g = &self.gradcheck;
        if g.seeds.is_empty() {
            return Err(Error::Config("gradcheck.seeds is empty".into()));
        }
        if !(g.h > 0.0 && g.tol > 0.0 && g.floor > 0.0) {
            return Err(Error::Config("gradcheck h, tol and floor must be positive".into()));
        }
        Ok(())
    }

    /// Checks that the encoder fits the videos of a dataset.
    pub fn check_dataset(&self, manifest: &Manifest) -> Result<()> {
        let e = &self.train.encoder;
        if (e.snippets, e.input_dim) != (manifest.snippets, manifest.input_dim) {
            return Err(Error::Config(format!(
                "encoder expects {}x{} features but the dataset has {}x{}",
                e.snippets, e.input_dim, manifest.snippets, manifest.input_dim
            )));
        }
        Ok(())
    }
}
