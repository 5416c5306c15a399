use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::diffusion::{linear_schedule, AnalyticScene, Codec, NoiseSchedule, TimestepConfig};
use crate::render_volume::{CameraPolicy, CameraPose};

pub const SCHEMA_VERSION: u32 = 1;
pub const BRIDGE_ENV: &str = "DISTILL3D_BRIDGE_URL";

/// Denoiser used by one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DenoiserSpec {
    /// View-conditioned oracle that renders an analytic scene.
    Zero123Oracle {
        scene: AnalyticScene,
        #[serde(default = "one")]
        supersample: usize,
    },
    /// Oracle decoding the image-prompt embedding.
    ImagePromptOracle,
    /// Denoiser served over HTTP; `DISTILL3D_BRIDGE_URL` overrides the endpoint.
    Bridge { endpoint: String },
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub iters: usize,
    pub resolution: usize,
    pub lr: f64,
    /// Multiplicative learning-rate decay per iteration.
    pub lr_decay: f64,
    pub ray_steps: usize,
    pub init_density: f32,
    pub init_color: f32,
    /// Density added at the origin, falling off linearly to zero at
    /// `init_blob_radius`. Gives the field a solid interior that the renders
    /// alone would not constrain.
    pub init_blob: f64,
    pub init_blob_radius: f64,
    /// Held-out views are scored every this many iterations (0 = never).
    pub eval_every: usize,
    pub eval_views: usize,
    /// Turntable frames are written every this many iterations (0 = end only).
    pub turntable_every: usize,
    /// Checkpoint cadence (0 = end only).
    pub checkpoint_every: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            iters: 400,
            resolution: 32,
            lr: 0.1,
            lr_decay: 0.995,
            ray_steps: 64,
            init_density: -2.0,
            init_color: 0.5,
            init_blob: 8.0,
            init_blob_radius: 0.8,
            eval_every: 10,
            eval_views: 4,
            turntable_every: 0,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub geometry_iters: usize,
    pub texture_iters: usize,
    pub tet_resolution: usize,
    pub sdf_lr: f64,
    pub deform_lr: f64,
    pub texture_lr: f64,
    /// Geometry learning rates are scaled by this factor in the texture phase.
    pub texture_phase_geometry_scale: f64,
    /// Whether the texture phase also updates geometry.
    pub texture_phase_geometry: bool,
    /// Default-view normal map refresh cadence in the texture phase.
    pub delta_refresh: usize,
    /// Patches per side of the image-prompt embedder.
    pub patches: usize,
    /// Segment length, in world units, over which density at the handoff
    /// iso-level reaches opacity one half.
    pub reference_step: f64,
    /// After the handoff, keep only the largest connected inside region and
    /// fill the cavities enclosed by it.
    pub remove_floaters: bool,
    pub checkpoint_every: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            geometry_iters: 300,
            texture_iters: 300,
            tet_resolution: 32,
            sdf_lr: 0.01,
            deform_lr: 0.002,
            texture_lr: 0.05,
            texture_phase_geometry_scale: 0.1,
            texture_phase_geometry: true,
            delta_refresh: 10,
            patches: 8,
            reference_step: 0.5,
            remove_floaters: true,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub timesteps: TimestepConfig,
    pub codec: Codec,
    pub clip_norm: Option<f64>,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            num_steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            timesteps: TimestepConfig::default(),
            codec: Codec::Identity,
            clip_norm: Some(10.0),
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule, PipelineError> {
        let s = linear_schedule(self.num_steps, self.beta_start, self.beta_end).map_err(|e| PipelineError::Config(e.to_string()))?;
        self.timesteps.validate(&s).map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewConfig {
    pub azimuth: f64,
    pub elevation: f64,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            azimuth: 0.0,
            elevation: 15.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema: u32,
    /// The image prompt, seen from the default view.
    pub input_image: PathBuf,
    /// Normal map of the image prompt; derived from `input_image` if absent.
    #[serde(default)]
    pub normal_image: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default)]
    pub text_embedding: Vec<f64>,
    #[serde(default = "white")]
    pub background: [f64; 3],
    #[serde(default)]
    pub camera: CameraPolicy,
    #[serde(default)]
    pub default_view: ViewConfig,
    #[serde(default)]
    pub diffusion: DiffusionConfig,
    pub stage1_denoiser: DenoiserSpec,
    #[serde(default = "image_prompt_oracle")]
    pub stage2_denoiser: DenoiserSpec,
    #[serde(default)]
    pub stage1: Stage1Config,
    #[serde(default)]
    pub stage2: Stage2Config,
    #[serde(default = "eight")]
    pub turntable_frames: usize,
}

fn white() -> [f64; 3] {
    [1.0; 3]
}

fn eight() -> usize {
    8
}

fn image_prompt_oracle() -> DenoiserSpec {
    DenoiserSpec::ImagePromptOracle
}

impl PipelineConfig {
    /// Reads, resolves relative paths against the config's directory, and
    /// validates.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.apply_env();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.input_image);
        if let Some(n) = &mut self.normal_image {
            fix(n);
        }
        fix(&mut self.output_dir);
    }

    /// Applies the bridge endpoint override from the environment.
    pub fn apply_env(&mut self) {
        if let Ok(url) = std::env::var(BRIDGE_ENV) {
            for spec in [&mut self.stage1_denoiser, &mut self.stage2_denoiser] {
                if let DenoiserSpec::Bridge { endpoint } = spec {
                    endpoint.clone_from(&url);
                }
            }
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let err = |m: String| Err(PipelineError::Config(m));
        if self.schema != SCHEMA_VERSION {
            return err(format!("unsupported config schema {} (expected {SCHEMA_VERSION})", self.schema));
        }
        for p in std::iter::once(&self.input_image).chain(self.normal_image.as_ref()) {
            if !p.is_file() {
                return err(format!("input file {} does not exist", p.display()));
            }
        }
        if self.stage1.iters == 0 || self.stage2.texture_iters == 0 {
            return err("stage-1 and texture iterations must be at least 1".into());
        }
        if !(4..=256).contains(&self.stage1.resolution) {
            return err(format!("stage-1 resolution {} outside [4, 256]", self.stage1.resolution));
        }
        if self.stage1.ray_steps < 16 {
            return err("stage-1 ray_steps must be at least 16".into());
        }
        if self.workers == 0 {
            return err("workers must be at least 1".into());
        }
        if self.turntable_frames == 0 {
            return err("turntable_frames must be at least 1".into());
        }
        if !(self.stage2.reference_step > 0.0 && self.stage2.reference_step.is_finite()) {
            return err(format!("reference_step must be positive, got {}", self.stage2.reference_step));
        }
        if !(self.stage1.init_blob.is_finite() && self.stage1.init_blob_radius >= 0.0) {
            return err("init_blob must be finite and init_blob_radius non-negative".into());
        }
        if self.stage2.delta_refresh == 0 {
            return err("delta_refresh must be at least 1".into());
        }
        self.camera.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        let (w, h) = (self.camera.width, self.camera.height);
        let [_, lh, lw] = self.diffusion.codec.latent_shape(w, h).map_err(|e| PipelineError::Config(e.to_string()))?;
        let p = self.stage2.patches;
        if p == 0 || w % p != 0 || h % p != 0 || lw % p != 0 || lh % p != 0 {
            return err(format!("{p} patches do not divide the {w}x{h} render or its {lw}x{lh} latent"));
        }
        self.diffusion.schedule()?;
        Ok(())
    }

    pub fn default_camera(&self) -> Result<CameraPose, PipelineError> {
        self.camera
            .pose(self.default_view.azimuth, self.default_view.elevation)
            .map_err(|e| PipelineError::Config(e.to_string()))
    }
}
