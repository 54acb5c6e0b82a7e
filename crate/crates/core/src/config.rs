//! Run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::eval::EvalOptions;
use crate::pointcloud::{default_regions, read_regions, RegionBox};
use crate::synth::DatasetOptions;
use crate::training::{ModelConfig, TrainConfig};

/// Everything a run reads, as one JSON document. Missing sections take
/// their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Manifest file or the directory holding `manifest.json`.
    pub dataset: Option<PathBuf>,
    pub synth: DatasetOptions,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    /// JSON region boxes; the built-in boxes when absent.
    pub regions: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut config: RunConfig = serde_json::from_str(&text)?;
        // Relative paths are taken from the config file's directory.
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut config.dataset, &mut config.regions, &mut config.out_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(io_err(path))
    }

    /// Checks the sections and that referenced input files exist.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        for p in [&self.dataset, &self.regions].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        if let Some(d) = &self.dataset {
            if !d.is_file() && !d.join(crate::synth::MANIFEST_FILE).is_file() {
                return Err(Error::Config(format!("{} holds no manifest", d.display())));
            }
        }
        Ok(())
    }

    pub fn region_boxes(&self) -> Result<Vec<RegionBox>> {
        match &self.regions {
            Some(p) => read_regions(p),
            None => Ok(default_regions()),
        }
    }
}
