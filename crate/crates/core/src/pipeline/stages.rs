use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{take_grid, Checkpoint, StageTag, TetOrigin};
use super::config::{DenoiserSpec, PipelineConfig};
use super::{MetricsLog, PipelineError};
use crate::diffusion::{
    AnalyticScene, Denoiser, DenoiserKind, ImagePromptOracle, NoiseSchedule, PatchDecoder, RemoteDenoiser, Zero123Oracle,
};
use crate::distill::{self, DistillSettings, DistillStep, MeshChannel, MeshState, ParamGroup, VolumeState};
use crate::fields::Grid3;
use crate::image_io::{load_png, save_png};
use crate::math;
use crate::optim::Adam;
use crate::prompts::{embed_image, geometry_prompt_difference, normal_from_rgb, ImagePromptEmbedding};
use crate::render_mesh::rasterize;
use crate::render_volume::{self, apply_relative, sample_camera, solve_relative, turntable, CameraPose, Image, VolumeSettings};
use crate::tetmesh::{build_tet_grid, export_mesh, marching_tets, SurfaceMesh, TetGrid};

/// Everything shared by the steps of one run.
pub struct RunContext {
    pub config: PipelineConfig,
    pub schedule: NoiseSchedule,
    pub settings: DistillSettings,
    pub default_camera: CameraPose,
    pub metrics: Option<MetricsLog>,
    /// Write turntables, meshes, and checkpoints into the output directory.
    pub write_artifacts: bool,
}

impl RunContext {
    /// Validates the config, creates the output directory, and opens the
    /// metrics files (appending when `append_metrics`).
    pub fn new(config: PipelineConfig, append_metrics: bool) -> Result<Self, PipelineError> {
        config.validate()?;
        std::fs::create_dir_all(&config.output_dir).map_err(|e| PipelineError::io(&config.output_dir, e))?;
        let metrics = Some(MetricsLog::open(&config.output_dir, append_metrics)?);
        Self::build(config, metrics, true)
    }

    /// A context that writes nothing to disk.
    pub fn in_memory(config: PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        Self::build(config, None, false)
    }

    fn build(config: PipelineConfig, metrics: Option<MetricsLog>, write_artifacts: bool) -> Result<Self, PipelineError> {
        let schedule = config.diffusion.schedule()?;
        let settings = DistillSettings {
            codec: config.diffusion.codec,
            timesteps: config.diffusion.timesteps,
            clip_norm: config.diffusion.clip_norm,
            vsd_train_ratio: 1,
        };
        let default_camera = config.default_camera()?;
        Ok(Self {
            config,
            schedule,
            settings,
            default_camera,
            metrics,
            write_artifacts,
        })
    }

    fn out(&self, name: &str) -> PathBuf {
        self.config.output_dir.join(name)
    }

    pub fn checkpoint_dir(&self, stage: StageTag) -> PathBuf {
        self.out("checkpoints").join(stage.to_string())
    }

    fn record(&mut self, stage: StageTag, iter: usize, step: &DistillStep, heldout: Option<f64>) -> Result<(), PipelineError> {
        match &mut self.metrics {
            Some(m) => m.record(stage, iter, &step.report, heldout),
            None => Ok(()),
        }
    }

    fn flush(&mut self) -> Result<(), PipelineError> {
        match &mut self.metrics {
            Some(m) => m.flush(),
            None => Ok(()),
        }
    }

    fn input_image(&self) -> Result<Image, PipelineError> {
        Ok(load_png(&self.config.input_image)?)
    }

    fn volume_settings(&self, jitter: Option<u64>) -> VolumeSettings {
        VolumeSettings {
            steps: self.config.stage1.ray_steps,
            background: self.config.background,
            jitter_seed: jitter,
            workers: self.config.workers,
        }
    }

    fn stage1_denoiser(&self) -> Result<Box<dyn Denoiser>, PipelineError> {
        match &self.config.stage1_denoiser {
            DenoiserSpec::Zero123Oracle { scene, supersample } => {
                let mut o = Zero123Oracle::new(scene.clone(), self.default_camera.clone(), self.settings.codec, self.schedule.clone());
                o.background = self.config.background;
                o.supersample = *supersample;
                Ok(Box::new(o))
            }
            DenoiserSpec::Bridge { endpoint } => Ok(Box::new(RemoteDenoiser::new(endpoint, DenoiserKind::Zero123))),
            DenoiserSpec::ImagePromptOracle => Err(PipelineError::Config(
                "stage 1 needs a view-conditioned denoiser (zero123_oracle or bridge)".into(),
            )),
        }
    }

    fn stage2_denoiser(&self) -> Result<Box<dyn Denoiser>, PipelineError> {
        match &self.config.stage2_denoiser {
            DenoiserSpec::ImagePromptOracle => {
                let [_, h, w] = self
                    .settings
                    .codec
                    .latent_shape(self.config.camera.width, self.config.camera.height)
                    .map_err(|e| PipelineError::Config(e.to_string()))?;
                let decoder = PatchDecoder {
                    patches: self.config.stage2.patches,
                    latent_height: h,
                    latent_width: w,
                };
                Ok(Box::new(ImagePromptOracle::new(decoder, self.schedule.clone())))
            }
            DenoiserSpec::Bridge { endpoint } => Ok(Box::new(RemoteDenoiser::new(endpoint, DenoiserKind::ImagePrompt))),
            DenoiserSpec::Zero123Oracle { .. } => Err(PipelineError::Config(
                "stage 2 needs an image-prompt denoiser (image_prompt_oracle or bridge)".into(),
            )),
        }
    }

    /// Fixed evaluation views spread over the sampled azimuth range.
    pub fn heldout_cameras(&self) -> Result<Vec<CameraPose>, PipelineError> {
        let p = &self.config.camera;
        let n = self.config.stage1.eval_views;
        let el = 0.5 * (p.elevation[0] + p.elevation[1]);
        (0..n)
            .map(|i| {
                let az = p.azimuth[0] + (i as f64 + 0.5) / n as f64 * (p.azimuth[1] - p.azimuth[0]);
                p.pose(az, el).map_err(|e| PipelineError::Config(e.to_string()))
            })
            .collect()
    }

    fn oracle_scene(&self) -> Option<(&AnalyticScene, usize)> {
        match &self.config.stage1_denoiser {
            DenoiserSpec::Zero123Oracle { scene, supersample } => Some((scene, *supersample)),
            _ => None,
        }
    }
}

/// Stage-1 parameters and optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct NerfState {
    pub density: Grid3,
    pub color: Grid3,
    pub density_opt: Adam,
    pub color_opt: Adam,
    pub iteration: usize,
    pub rng: ChaCha8Rng,
}

impl NerfState {
    pub fn init(config: &PipelineConfig) -> Result<Self, PipelineError> {
        let s = &config.stage1;
        let density = Grid3::from_fn(s.resolution, 1, |p| {
            let blob = if s.init_blob_radius > 0.0 { s.init_blob * (1.0 - math::norm(p) / s.init_blob_radius).max(0.0) } else { 0.0 };
            vec![s.init_density as f64 + blob]
        })?;
        let color = Grid3::filled(s.resolution, 3, s.init_color)?;
        Ok(Self {
            density_opt: Adam::new(density.values().len(), s.lr),
            color_opt: Adam::new(color.values().len(), s.lr),
            density,
            color,
            iteration: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        })
    }

    pub fn checkpoint(&self, complete: bool) -> Checkpoint {
        Checkpoint {
            stage: StageTag::Nerf,
            iteration: self.iteration,
            complete,
            rng: self.rng.clone(),
            optimizers: [("density".to_string(), self.density_opt.clone()), ("color".to_string(), self.color_opt.clone())].into(),
            tet_resolution: None,
            sdf: None,
            deform: None,
            origin: None,
            y_def: None,
        }
    }

    pub fn save(&self, dir: &Path, complete: bool) -> Result<(), PipelineError> {
        self.checkpoint(complete).save(dir, &[("density", &self.density), ("color", &self.color)])
    }

    pub fn load(dir: &Path) -> Result<(Self, bool), PipelineError> {
        let (ck, mut grids) = Checkpoint::load(dir)?;
        if ck.stage != StageTag::Nerf {
            return Err(PipelineError::Checkpoint(format!("expected a nerf checkpoint, found {}", ck.stage)));
        }
        Ok((
            Self {
                density: take_grid(&mut grids, "density")?,
                color: take_grid(&mut grids, "color")?,
                density_opt: ck.optimizer("density")?,
                color_opt: ck.optimizer("color")?,
                iteration: ck.iteration,
                rng: ck.rng,
            },
            ck.complete,
        ))
    }

    pub fn render(&self, cam: &CameraPose, settings: &VolumeSettings) -> Image {
        render_volume::render(&self.density, &self.color, cam, settings)
    }
}

fn all_finite(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite())
}

fn non_finite(stage: StageTag, iter: usize, step: &DistillStep) -> PipelineError {
    PipelineError::NonFinite {
        stage,
        iter,
        report: serde_json::to_string(&step.report).unwrap_or_default(),
    }
}

fn group(step: &DistillStep, g: ParamGroup) -> &[f64] {
    step.gradients.get(g).expect("rule produced the expected parameter group")
}

/// Runs stage 1 from `state` until `config.stage1.iters` iterations are done.
pub fn run_stage1(ctx: &mut RunContext, mut state: NerfState) -> Result<NerfState, PipelineError> {
    let cfg = ctx.config.clone();
    let s1 = &cfg.stage1;
    let denoiser = ctx.stage1_denoiser()?;
    let reference = ctx.input_image()?;
    let eval_settings = ctx.volume_settings(None);
    let heldout: Vec<(CameraPose, Image)> = match ctx.oracle_scene() {
        Some((scene, ss)) if s1.eval_every > 0 => ctx
            .heldout_cameras()?
            .into_iter()
            .map(|c| {
                let img = scene.render(&c, cfg.background, ss);
                (c, img)
            })
            .collect(),
        _ => Vec::new(),
    };
    let stage = StageTag::Nerf;
    while state.iteration < s1.iters {
        let iter = state.iteration;
        let sampled = sample_camera(&mut state.rng, &cfg.camera).map_err(|e| PipelineError::Config(e.to_string()))?;
        let rel = solve_relative(&ctx.default_camera, &sampled);
        let cam = apply_relative(&ctx.default_camera, &rel);
        let vs = ctx.volume_settings(Some(cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(iter as u64)));
        let step = {
            let rs = VolumeState::new(&state.density, &state.color, cam, &vs);
            distill::zero123_sds_grad(&rs, denoiser.as_ref(), &reference, &rel, &ctx.default_camera, &ctx.schedule, &ctx.settings, &mut state.rng)
                .map_err(|source| PipelineError::Step { stage, iter, source })?
        };
        let (gd, gc) = (group(&step, ParamGroup::Density), group(&step, ParamGroup::Color));
        if !all_finite(gd) || !all_finite(gc) {
            return Err(non_finite(stage, iter, &step));
        }
        let lr = s1.lr * s1.lr_decay.powi(iter as i32);
        state.density_opt.lr = lr;
        state.color_opt.lr = lr;
        state.density_opt.update_f32(state.density.values_mut(), gd);
        state.color_opt.update_f32(state.color.values_mut(), gc);
        if state.density.values().iter().chain(state.color.values()).any(|v| !v.is_finite()) {
            return Err(non_finite(stage, iter, &step));
        }
        state.iteration += 1;
        let done = state.iteration;

        let heldout_mse = (!heldout.is_empty() && done % s1.eval_every == 0).then(|| {
            heldout.iter().map(|(c, target)| state.render(c, &eval_settings).mse(target)).sum::<f64>() / heldout.len() as f64
        });
        ctx.record(stage, iter, &step, heldout_mse)?;
        if ctx.write_artifacts {
            if s1.turntable_every > 0 && done % s1.turntable_every == 0 && done < s1.iters {
                write_nerf_turntable(ctx, &state, &format!("stage1/iter{done:05}"))?;
            }
            if s1.checkpoint_every > 0 && done % s1.checkpoint_every == 0 && done < s1.iters {
                state.save(&ctx.checkpoint_dir(stage), false)?;
            }
        }
    }
    if ctx.write_artifacts {
        write_nerf_turntable(ctx, &state, "stage1/final")?;
        state.save(&ctx.checkpoint_dir(stage), true)?;
    }
    ctx.flush()?;
    Ok(state)
}

fn write_nerf_turntable(ctx: &RunContext, state: &NerfState, prefix: &str) -> Result<(), PipelineError> {
    let settings = ctx.volume_settings(None);
    let cams = turntable(&ctx.config.camera, ctx.config.turntable_frames, ctx.config.default_view.elevation)
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let dir = ctx.out(prefix);
    std::fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
    for (i, c) in cams.iter().enumerate() {
        save_png(&state.render(c, &settings), dir.join(format!("turntable_{i:02}.png")))?;
    }
    Ok(())
}

/// Density-to-SDF handoff: `S_i = iso - softplus(density(v_i))`, `ΔV = 0`.
pub fn nerf_to_tetgrid(density: &Grid3, tet_resolution: usize, iso: f64) -> Result<TetGrid, PipelineError> {
    let mut grid = build_tet_grid(tet_resolution)?;
    grid.set_sdf_fn(|p| iso - math::softplus(density.sample_trilinear(p).value[0]));
    let inside = grid.sdf.iter().filter(|s| **s < 0.0).count();
    if inside == 0 || inside == grid.sdf.len() {
        return Err(PipelineError::NoSurface { iso });
    }
    Ok(grid)
}

/// Iso-level at which a sample of length `reference_step` has opacity 1/2.
pub fn handoff_iso(reference_step: f64) -> f64 {
    std::f64::consts::LN_2 / reference_step
}

/// Stage-2 parameters and optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2State {
    pub grid: TetGrid,
    pub texture: Grid3,
    pub origin: TetOrigin,
    /// `Geometry` or `Texture`.
    pub phase: StageTag,
    /// Iterations completed in the current phase.
    pub iteration: usize,
    pub sdf_opt: Adam,
    pub deform_opt: Adam,
    pub texture_opt: Adam,
    pub rng: ChaCha8Rng,
    pub y_def: Option<ImagePromptEmbedding>,
}

impl Stage2State {
    pub fn new(config: &PipelineConfig, grid: TetGrid, texture: Grid3, origin: TetOrigin) -> Self {
        let s2 = &config.stage2;
        Self {
            sdf_opt: Adam::new(grid.vertex_count(), s2.sdf_lr),
            deform_opt: Adam::new(grid.vertex_count() * 3, s2.deform_lr),
            texture_opt: Adam::new(texture.values().len(), s2.texture_lr),
            grid,
            texture,
            origin,
            phase: StageTag::Geometry,
            iteration: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1)),
            y_def: None,
        }
    }

    /// Converts a stage-1 result into the initial stage-2 state; the texture
    /// starts from the stage-1 color grid.
    pub fn from_nerf(config: &PipelineConfig, nerf: &NerfState) -> Result<Self, PipelineError> {
        let iso = handoff_iso(config.stage2.reference_step);
        let mut grid = nerf_to_tetgrid(&nerf.density, config.stage2.tet_resolution, iso)?;
        if config.stage2.remove_floaters {
            let dropped = grid.keep_largest_inside_component();
            let filled = grid.fill_cavities();
            log::info!("handoff: dropped {dropped} floater vertices, filled {filled} cavity vertices");
        }
        let complete = nerf.iteration >= config.stage1.iters;
        Ok(Self::new(config, grid, nerf.color.clone(), TetOrigin::Handoff { iso, complete }))
    }

    pub fn save(&self, dir: &Path, complete: bool) -> Result<(), PipelineError> {
        let ck = Checkpoint {
            stage: self.phase,
            iteration: self.iteration,
            complete,
            rng: self.rng.clone(),
            optimizers: [
                ("sdf".to_string(), self.sdf_opt.clone()),
                ("deform".to_string(), self.deform_opt.clone()),
                ("texture".to_string(), self.texture_opt.clone()),
            ]
            .into(),
            tet_resolution: Some(self.grid.resolution()),
            sdf: Some(self.grid.sdf.clone()),
            deform: Some(self.grid.deform.clone()),
            origin: Some(self.origin),
            y_def: self.y_def.as_ref().map(|y| y.vector.clone()),
        };
        ck.save(dir, &[("texture", &self.texture)])
    }

    pub fn load(config: &PipelineConfig, dir: &Path) -> Result<Self, PipelineError> {
        let (ck, mut grids) = Checkpoint::load(dir)?;
        if ck.stage == StageTag::Nerf {
            return Err(PipelineError::Checkpoint("expected a geometry or texture checkpoint".into()));
        }
        let missing = |f: &str| PipelineError::Checkpoint(format!("stage-2 checkpoint lacks `{f}`"));
        let (sdf_opt, deform_opt, texture_opt) = (ck.optimizer("sdf")?, ck.optimizer("deform")?, ck.optimizer("texture")?);
        let mut grid = build_tet_grid(ck.tet_resolution.ok_or_else(|| missing("tet_resolution"))?)?;
        grid.set_sdf(ck.sdf.ok_or_else(|| missing("sdf"))?)?;
        let deform = ck.deform.ok_or_else(|| missing("deform"))?;
        if deform.len() != grid.vertex_count() {
            return Err(PipelineError::Checkpoint("deformation length does not match the tet grid".into()));
        }
        grid.deform = deform;
        let (w, h) = (config.camera.width, config.camera.height);
        Ok(Self {
            sdf_opt,
            deform_opt,
            texture_opt,
            texture: take_grid(&mut grids, "texture")?,
            grid,
            origin: ck.origin.ok_or_else(|| missing("origin"))?,
            phase: ck.stage,
            iteration: ck.iteration,
            rng: ck.rng,
            y_def: ck
                .y_def
                .map(|v| ImagePromptEmbedding::from_vector(v, config.stage2.patches, (w, h))),
        })
    }

    fn apply_geometry(&mut self, step: &DistillStep) {
        if let (Some(gs), Some(gd)) = (step.gradients.get(ParamGroup::Sdf), step.gradients.get(ParamGroup::Deform)) {
            self.sdf_opt.update(&mut self.grid.sdf, gs);
            let mut flat: Vec<f64> = self.grid.deform.iter().flat_map(|d| d.iter().copied()).collect();
            self.deform_opt.update(&mut flat, gd);
            for (d, c) in self.grid.deform.iter_mut().zip(flat.chunks_exact(3)) {
                *d = [c[0], c[1], c[2]];
            }
            self.grid.clamp_deform();
        }
    }

    fn enter_texture_phase(&mut self, config: &PipelineConfig) {
        let s2 = &config.stage2;
        self.phase = StageTag::Texture;
        self.iteration = 0;
        self.sdf_opt.lr = s2.sdf_lr * s2.texture_phase_geometry_scale;
        self.deform_opt.lr = s2.deform_lr * s2.texture_phase_geometry_scale;
    }
}

/// Final stage-2 artifacts.
#[derive(Debug, Clone)]
pub struct Stage2Output {
    pub state: Stage2State,
    pub mesh: SurfaceMesh,
    /// Per-vertex texture colors.
    pub colors: Vec<[f64; 3]>,
}

fn extract(grid: &TetGrid, stage: StageTag, iter: usize) -> Result<SurfaceMesh, PipelineError> {
    let mesh = marching_tets(grid);
    if mesh.is_empty() {
        return Err(PipelineError::DegenerateGeometry(format!("{stage} iteration {iter}")));
    }
    Ok(mesh)
}

/// Stage 2: geometry phase with normal-map distillation, then texture phase
/// with compensated image-prompt distillation. A grid that did not come from
/// a completed stage 1 is rejected unless `allow_any_origin`.
pub fn run_stage2(ctx: &mut RunContext, mut state: Stage2State, allow_any_origin: bool) -> Result<Stage2Output, PipelineError> {
    match state.origin {
        TetOrigin::Handoff { complete: true, .. } => {}
        _ if allow_any_origin => {}
        TetOrigin::Handoff { complete: false, .. } => {
            return Err(PipelineError::Provenance("tet grid comes from an unfinished stage 1".into()))
        }
        TetOrigin::Manual => return Err(PipelineError::Provenance("tet grid was not produced by the stage-1 handoff".into())),
    }
    let cfg = ctx.config.clone();
    let s2 = &cfg.stage2;
    let denoiser = ctx.stage2_denoiser()?;
    let rgb = ctx.input_image()?;
    let normal = match &cfg.normal_image {
        Some(p) => load_png(p)?,
        None => normal_from_rgb(&rgb),
    };
    let prompt_err = |e| PipelineError::Config(format!("image prompt: {e}"));
    let y_rgb = embed_image(&rgb, s2.patches).map_err(prompt_err)?;
    let y_n = embed_image(&normal, s2.patches).map_err(prompt_err)?;
    let text = cfg.text_embedding.clone();

    if state.phase == StageTag::Geometry {
        let stage = StageTag::Geometry;
        while state.iteration < s2.geometry_iters {
            let iter = state.iteration;
            let mesh = extract(&state.grid, stage, iter)?;
            let cam = sample_camera(&mut state.rng, &cfg.camera).map_err(|e| PipelineError::Config(e.to_string()))?;
            let step = {
                let rs = MeshState::new(&state.grid, &mesh, &state.texture, &cam, cfg.background, MeshChannel::Normal)
                    .map_err(|source| PipelineError::Step { stage, iter, source })?;
                distill::ipsd_geo_grad(&rs, denoiser.as_ref(), &y_n, &text, &ctx.schedule, &ctx.settings, &mut state.rng)
                    .map_err(|source| PipelineError::Step { stage, iter, source })?
            };
            if !all_finite(group(&step, ParamGroup::Sdf)) || !all_finite(group(&step, ParamGroup::Deform)) {
                return Err(non_finite(stage, iter, &step));
            }
            state.apply_geometry(&step);
            state.iteration += 1;
            ctx.record(stage, iter, &step, None)?;
            if ctx.write_artifacts && s2.checkpoint_every > 0 && state.iteration % s2.checkpoint_every == 0 && state.iteration < s2.geometry_iters {
                state.save(&ctx.checkpoint_dir(stage), false)?;
            }
        }
        if ctx.write_artifacts {
            state.save(&ctx.checkpoint_dir(stage), true)?;
        }
        state.enter_texture_phase(&cfg);
    }

    let stage = StageTag::Texture;
    while state.iteration < s2.texture_iters {
        let iter = state.iteration;
        let mesh = extract(&state.grid, stage, iter)?;
        if iter % s2.delta_refresh == 0 || state.y_def.is_none() {
            let def = rasterize(&mesh, &state.texture, &ctx.default_camera, cfg.background);
            state.y_def = Some(embed_image(&def.normal_map, s2.patches).map_err(prompt_err)?);
        }
        let cam = sample_camera(&mut state.rng, &cfg.camera).map_err(|e| PipelineError::Config(e.to_string()))?;
        let step = {
            let mut rs = MeshState::new(&state.grid, &mesh, &state.texture, &cam, cfg.background, MeshChannel::Rgb)
                .map_err(|source| PipelineError::Step { stage, iter, source })?;
            rs.geometry = s2.texture_phase_geometry;
            let y_ran = embed_image(&rs.raster.normal_map, s2.patches).map_err(prompt_err)?;
            let y_def = state.y_def.as_ref().expect("refreshed above");
            let delta = geometry_prompt_difference(&y_ran, y_def)
                .map_err(prompt_err)?
                .with_views(cam.clone(), ctx.default_camera.clone());
            distill::ipsd_tex_grad(&rs, denoiser.as_ref(), &y_rgb, &delta, &text, &ctx.schedule, &ctx.settings, &mut state.rng)
                .map_err(|source| PipelineError::Step { stage, iter, source })?
        };
        let gt = group(&step, ParamGroup::Texture);
        if !all_finite(gt) || step.gradients.groups.values().any(|g| !all_finite(g)) {
            return Err(non_finite(stage, iter, &step));
        }
        state.texture_opt.update_f32(state.texture.values_mut(), gt);
        state.apply_geometry(&step);
        state.iteration += 1;
        ctx.record(stage, iter, &step, None)?;
        if ctx.write_artifacts && s2.checkpoint_every > 0 && state.iteration % s2.checkpoint_every == 0 && state.iteration < s2.texture_iters {
            state.save(&ctx.checkpoint_dir(stage), false)?;
        }
    }
    ctx.flush()?;

    let mesh = extract(&state.grid, stage, state.iteration)?;
    let colors = vertex_colors(&mesh, &state.texture);
    if ctx.write_artifacts {
        state.save(&ctx.checkpoint_dir(stage), true)?;
        export_mesh(&mesh, Some(&colors), &ctx.out("mesh.obj"))?;
        state.texture.save(&ctx.out("texture.grid3"))?;
        write_mesh_turntable(&mesh, &state.texture, &cfg, &cfg.output_dir)?;
    }
    Ok(Stage2Output { state, mesh, colors })
}

pub fn vertex_colors(mesh: &SurfaceMesh, texture: &Grid3) -> Vec<[f64; 3]> {
    mesh.vertices
        .iter()
        .map(|v| {
            let s = texture.sample_trilinear(*v).value;
            [s[0], s[1], s[2]].map(|c| c.clamp(0.0, 1.0))
        })
        .collect()
}

/// Writes `turntable_XX.png` frames of a textured mesh into `dir`.
pub fn write_mesh_turntable(mesh: &SurfaceMesh, texture: &Grid3, cfg: &PipelineConfig, dir: &Path) -> Result<usize, PipelineError> {
    let cams = turntable(&cfg.camera, cfg.turntable_frames, cfg.default_view.elevation).map_err(|e| PipelineError::Config(e.to_string()))?;
    std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    for (i, c) in cams.iter().enumerate() {
        save_png(&rasterize(mesh, texture, c, cfg.background).rgb, dir.join(format!("turntable_{i:02}.png")))?;
    }
    Ok(cams.len())
}

/// Both stages back to back, starting from scratch.
pub fn generate(config: PipelineConfig) -> Result<Stage2Output, PipelineError> {
    let mut ctx = RunContext::new(config, false)?;
    let init = NerfState::init(&ctx.config)?;
    let nerf = run_stage1(&mut ctx, init)?;
    let state = Stage2State::from_nerf(&ctx.config, &nerf)?;
    run_stage2(&mut ctx, state, false)
}
