//! Stage checkpoints: a directory holding `checkpoint.json` plus one GRID3
//! file per voxel grid.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::fields::Grid3;
use crate::math::Vec3;
use crate::optim::Adam;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    Nerf,
    Geometry,
    Texture,
}

impl std::fmt::Display for StageTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StageTag::Nerf => "nerf",
            StageTag::Geometry => "geometry",
            StageTag::Texture => "texture",
        })
    }
}

/// How a stage-2 tet grid came to be.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TetOrigin {
    /// Converted from a stage-1 density grid; `complete` records whether
    /// stage 1 had run all its iterations.
    Handoff { iso: f64, complete: bool },
    /// Supplied directly by the caller.
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub stage: StageTag,
    /// Iterations completed within the tagged stage or phase.
    pub iteration: usize,
    /// Whether the tagged stage ran to its configured iteration count.
    pub complete: bool,
    pub rng: ChaCha8Rng,
    pub optimizers: BTreeMap<String, Adam>,
    #[serde(default)]
    pub tet_resolution: Option<usize>,
    #[serde(default)]
    pub sdf: Option<Vec<f64>>,
    #[serde(default)]
    pub deform: Option<Vec<Vec3>>,
    #[serde(default)]
    pub origin: Option<TetOrigin>,
    /// Cached default-view normal embedding of the texture phase.
    #[serde(default)]
    pub y_def: Option<Vec<f64>>,
}

const FILE: &str = "checkpoint.json";

impl Checkpoint {
    pub fn save(&self, dir: &Path, grids: &[(&str, &Grid3)]) -> Result<(), PipelineError> {
        std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
        for (name, grid) in grids {
            grid.save(&dir.join(format!("{name}.grid3")))?;
        }
        let path = dir.join(FILE);
        let json = serde_json::to_string(self).map_err(|e| PipelineError::Checkpoint(e.to_string()))?;
        std::fs::write(&path, json).map_err(|e| PipelineError::io(&path, e))
    }

    /// Loads the checkpoint and every `*.grid3` file next to it.
    pub fn load(dir: &Path) -> Result<(Self, BTreeMap<String, Grid3>), PipelineError> {
        let path = dir.join(FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| PipelineError::io(&path, e))?;
        let ck: Checkpoint =
            serde_json::from_str(&text).map_err(|e| PipelineError::Checkpoint(format!("{}: {e}", path.display())))?;
        let mut grids = BTreeMap::new();
        let entries = std::fs::read_dir(dir).map_err(|e| PipelineError::io(dir, e))?;
        for entry in entries {
            let p = entry.map_err(|e| PipelineError::io(dir, e))?.path();
            if p.extension().is_some_and(|x| x == "grid3") {
                let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
                grids.insert(name, Grid3::load(&p)?);
            }
        }
        Ok((ck, grids))
    }

    pub fn optimizer(&self, name: &str) -> Result<Adam, PipelineError> {
        self.optimizers
            .get(name)
            .cloned()
            .ok_or_else(|| PipelineError::Checkpoint(format!("optimizer state `{name}` missing")))
    }
}

pub(crate) fn take_grid(grids: &mut BTreeMap<String, Grid3>, name: &str) -> Result<Grid3, PipelineError> {
    grids
        .remove(name)
        .ok_or_else(|| PipelineError::Checkpoint(format!("grid `{name}.grid3` missing")))
}
