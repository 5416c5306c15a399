//! Two-stage orchestration: a voxel radiance field trained with
//! view-conditioned distillation, handed off to a deformable tet grid, whose
//! surface is refined in geometry and then texture with image-prompt
//! distillation.
//!
//! Runs are deterministic for a fixed seed and `workers = 1`; checkpoints
//! carry every piece of optimizer and rng state needed to resume bit-exactly.

pub mod checkpoint;
pub mod cli;
pub mod config;
mod metrics;
pub mod stages;

use thiserror::Error;

use crate::distill::DistillError;
use crate::fields::FieldError;
use crate::image_io::ImageIoError;
use crate::tetmesh::TetError;

pub use checkpoint::{Checkpoint, StageTag, TetOrigin};
pub use config::{DenoiserSpec, PipelineConfig, Stage1Config, Stage2Config};
pub use metrics::MetricsLog;
pub use stages::{
    generate, nerf_to_tetgrid, run_stage1, run_stage2, NerfState, RunContext, Stage2Output, Stage2State,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{stage} iteration {iter}: {source}")]
    Step {
        stage: StageTag,
        iter: usize,
        #[source]
        source: DistillError,
    },
    #[error("{stage} iteration {iter}: parameters became non-finite; last step report: {report}")]
    NonFinite { stage: StageTag, iter: usize, report: String },
    #[error("degenerate geometry: the extracted mesh is empty ({0})")]
    DegenerateGeometry(String),
    #[error("no surface at iso {iso}: every SDF value has the same sign")]
    NoSurface { iso: f64 },
    #[error("stage ordering: {0}")]
    Provenance(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{0} invariant checks failed")]
    ChecksFailed(usize),
    #[error(transparent)]
    Image(#[from] ImageIoError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Tet(#[from] TetError),
}

impl PipelineError {
    /// Process exit code: 1 for configuration problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            _ => 2,
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
