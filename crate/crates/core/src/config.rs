//! One TOML file describes a whole run; every command writes the resolved
//! copy next to its outputs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channel::{ArrayGeometry, SubcarrierGrid};
use crate::error::{Error, Result};
use crate::model::{ArchConfig, ModelKind};
use crate::scene::{RenderConfig, SceneConfig, Trajectory};
use crate::train::TrainConfig;

pub const RESOLVED_CONFIG: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Total poses when trajectories are generated automatically.
    pub samples: usize,
    /// Seconds between consecutive samples of a trajectory.
    pub sample_interval: f64,
    /// Train, validation, test.
    pub ratios: [f64; 3],
    /// Explicit trajectories; otherwise one sweep per road and direction.
    pub trajectories: Option<Vec<Trajectory>>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            samples: 2000,
            sample_interval: 0.02,
            ratios: [0.7, 0.1, 0.2],
            trajectories: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FewShotConfig {
    pub ratios: Vec<f64>,
    pub seeds: Vec<u64>,
    pub models: Vec<ModelKind>,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        FewShotConfig {
            ratios: vec![0.1, 0.2, 0.3],
            seeds: vec![1, 2, 3],
            models: ModelKind::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives scene layout, lane wander and the split.
    pub seed: u64,
    pub scene: SceneConfig,
    pub grid: SubcarrierGrid,
    pub array: ArrayGeometry,
    pub render: RenderConfig,
    pub data: DataConfig,
    pub model: ArchConfig,
    pub train: TrainConfig,
    pub fewshot: FewShotConfig,
}

/// Named scene layouts selectable from the command line.
pub fn scene_preset(name: &str) -> Result<SceneConfig> {
    match name {
        "default" | "los" => Ok(SceneConfig::default()),
        "empty" => Ok(SceneConfig::empty()),
        "blockage" => Ok(SceneConfig::blockage_heavy()),
        _ => Err(Error::Config(format!("unknown scene preset {name:?}; expected default, empty or blockage"))),
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_toml(&text)
            }
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG);
        fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.array.validate()?;
        self.train.validate()?;
        if self.render.width == 0 || self.render.height == 0 {
            return Err(Error::Config("render resolution must be positive".into()));
        }
        Ok(())
    }
}
