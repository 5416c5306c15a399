//! Score-distillation gradient rules.
//!
//! Every rule follows the same transaction: encode the current render,
//! draw `(t, eps)`, ask a denoiser for `eps_hat`, form the latent-space
//! upstream `w(t) * (eps_hat - eps)` (or a variant of it), pull it back
//! through the codec adjoint and the renderer, and clip the result. No
//! gradient ever reaches a denoiser.
//!
//! Renderers plug in through [`RenderState`]: [`ImageState`] treats the image
//! itself as the parameters, [`VolumeState`] wraps the voxel radiance field,
//! and [`MeshState`] wraps a rasterized marching-tets surface.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{
    add_noise, Codec, Denoiser, DenoiserCondition, DiffusionError, Latent, NoiseSchedule, ResidualScoreModel, TimestepConfig,
    TimestepSample,
};
use crate::fields::Grid3;
use crate::math::Vec3;
use crate::prompts::{compensate, GeometryPromptDifference, ImagePromptEmbedding, PromptError};
use crate::render_mesh::{rasterize, rasterize_backward, RasterError, RasterOutput};
use crate::render_volume::{self, apply_relative, CameraPose, Image, RelativePose, VolumeSettings};
use crate::tetmesh::{marching_tets_backward, vertex_normals_backward, SurfaceMesh, TetError, TetGrid};

/// Pose agreement required between a render and its condition.
pub const POSE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("{rule} step at t={t}: denoiser failed: {source}")]
    Denoiser {
        rule: Rule,
        t: usize,
        #[source]
        source: DiffusionError,
    },
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Tet(#[from] TetError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("degenerate geometry: the extracted mesh is empty")]
    DegenerateGeometry,
    #[error("render camera does not match the relative pose of the condition")]
    PoseMismatch,
    #[error("geometry prompt difference was built for a different viewpoint")]
    StaleDelta,
    #[error("condition is missing `{0}`")]
    MissingCondition(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Sds,
    Vsd,
    Zero123Sds,
    IpsdGeo,
    IpsdTex,
}

impl std::fmt::Display for Rule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Rule::Sds => "sds",
            Rule::Vsd => "vsd",
            Rule::Zero123Sds => "zero123_sds",
            Rule::IpsdGeo => "ipsd_geo",
            Rule::IpsdTex => "ipsd_tex",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Pixels,
    Density,
    Color,
    Texture,
    Sdf,
    Deform,
}

/// Parameter gradients keyed by group. `Deform` is flattened `xyz` per vertex.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    pub groups: BTreeMap<ParamGroup, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, group: ParamGroup) -> Option<&[f64]> {
        self.groups.get(&group).map(|v| v.as_slice())
    }

    pub fn insert(&mut self, group: ParamGroup, values: Vec<f64>) {
        self.groups.insert(group, values);
    }

    pub fn norms(&self) -> BTreeMap<ParamGroup, f64> {
        self.groups
            .iter()
            .map(|(k, v)| (*k, v.iter().map(|x| x * x).sum::<f64>().sqrt()))
            .collect()
    }

    pub fn global_norm(&self) -> f64 {
        self.groups.values().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.groups.values_mut().flatten().for_each(|x| *x *= s);
    }

    pub fn is_zero(&self) -> bool {
        self.groups.values().flatten().all(|x| *x == 0.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.groups.values().flatten().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Diagnostics of one distillation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillStepReport {
    pub rule: Rule,
    pub t: usize,
    pub weight: f64,
    /// Norm of the noise residual entering the upstream gradient.
    pub residual_norm: f64,
    pub duration_secs: f64,
    /// Per-group norms before clipping.
    pub grad_norms: BTreeMap<ParamGroup, f64>,
    pub clipped: bool,
    /// Loss of the residual-model update run by a VSD step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillSettings {
    pub codec: Codec,
    pub timesteps: TimestepConfig,
    /// Global-norm clip on the parameter gradients; `None` disables it.
    pub clip_norm: Option<f64>,
    /// Residual-model updates per VSD step.
    pub vsd_train_ratio: usize,
}

impl Default for DistillSettings {
    fn default() -> Self {
        Self {
            codec: Codec::Identity,
            timesteps: TimestepConfig::default(),
            clip_norm: Some(10.0),
            vsd_train_ratio: 1,
        }
    }
}

/// A differentiable render whose parameters can receive gradients.
pub trait RenderState {
    fn image(&self) -> &Image;

    /// Pulls dL/dpixel (image layout) back to the parameters.
    fn backward(&self, image_grad: &[f64]) -> Result<Gradients, DistillError>;
}

/// The image is the parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageState {
    pub image: Image,
}

impl RenderState for ImageState {
    fn image(&self) -> &Image {
        &self.image
    }

    fn backward(&self, image_grad: &[f64]) -> Result<Gradients, DistillError> {
        let mut g = Gradients::default();
        g.insert(ParamGroup::Pixels, image_grad.to_vec());
        Ok(g)
    }
}

/// Volume render of a density/color grid pair.
#[derive(Debug, Clone)]
pub struct VolumeState<'a> {
    pub density: &'a Grid3,
    pub color: &'a Grid3,
    pub camera: CameraPose,
    pub settings: &'a VolumeSettings,
    pub image: Image,
}

impl<'a> VolumeState<'a> {
    pub fn new(density: &'a Grid3, color: &'a Grid3, camera: CameraPose, settings: &'a VolumeSettings) -> Self {
        let image = render_volume::render(density, color, &camera, settings);
        Self {
            density,
            color,
            camera,
            settings,
            image,
        }
    }
}

impl RenderState for VolumeState<'_> {
    fn image(&self) -> &Image {
        &self.image
    }

    fn backward(&self, image_grad: &[f64]) -> Result<Gradients, DistillError> {
        let g = render_volume::render_backward(self.density, self.color, &self.camera, self.settings, image_grad);
        let mut out = Gradients::default();
        out.insert(ParamGroup::Density, g.density);
        out.insert(ParamGroup::Color, g.color);
        Ok(out)
    }
}

/// Which rasterizer output a [`MeshState`] exposes as its image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeshChannel {
    Rgb,
    Normal,
}

/// Rasterized marching-tets surface with its texture.
#[derive(Debug, Clone)]
pub struct MeshState<'a> {
    pub grid: &'a TetGrid,
    pub mesh: &'a SurfaceMesh,
    pub texture: &'a Grid3,
    pub raster: RasterOutput,
    pub channel: MeshChannel,
    /// Whether gradients flow to `S` and `ΔV`; texture gradients always flow
    /// for the rgb channel.
    pub geometry: bool,
}

impl<'a> MeshState<'a> {
    pub fn new(
        grid: &'a TetGrid,
        mesh: &'a SurfaceMesh,
        texture: &'a Grid3,
        camera: &CameraPose,
        background: [f64; 3],
        channel: MeshChannel,
    ) -> Result<Self, DistillError> {
        if mesh.is_empty() {
            return Err(DistillError::DegenerateGeometry);
        }
        Ok(Self {
            grid,
            mesh,
            texture,
            raster: rasterize(mesh, texture, camera, background),
            channel,
            geometry: true,
        })
    }

    pub fn camera(&self) -> &CameraPose {
        &self.raster.camera
    }
}

impl RenderState for MeshState<'_> {
    fn image(&self) -> &Image {
        match self.channel {
            MeshChannel::Rgb => &self.raster.rgb,
            MeshChannel::Normal => &self.raster.normal_map,
        }
    }

    fn backward(&self, image_grad: &[f64]) -> Result<Gradients, DistillError> {
        let (up_rgb, up_normal) = match self.channel {
            MeshChannel::Rgb => (Some(image_grad), None),
            MeshChannel::Normal => (None, Some(image_grad)),
        };
        let rg = rasterize_backward(&self.raster, self.mesh, self.texture, up_rgb, up_normal)?;
        let mut out = Gradients::default();
        if self.channel == MeshChannel::Rgb {
            out.insert(ParamGroup::Texture, rg.texture);
        }
        if self.geometry {
            let mut positions = rg.positions;
            if self.channel == MeshChannel::Normal {
                let from_normals = vertex_normals_backward(self.mesh, &rg.normals);
                for (p, q) in positions.iter_mut().zip(from_normals) {
                    *p = crate::math::add(*p, q);
                }
            }
            let tg = marching_tets_backward(self.grid, self.mesh, &positions)?;
            out.insert(ParamGroup::Sdf, tg.sdf);
            out.insert(ParamGroup::Deform, flatten(&tg.deform));
        }
        Ok(out)
    }
}

fn flatten(v: &[Vec3]) -> Vec<f64> {
    v.iter().flat_map(|p| p.iter().copied()).collect()
}

/// Result of a distillation step.
#[derive(Debug, Clone)]
pub struct DistillStep {
    pub gradients: Gradients,
    pub report: DistillStepReport,
}

struct Noised {
    latent: Latent,
    sample: TimestepSample,
    noisy: Latent,
}

fn noise_render(state: &dyn RenderState, settings: &DistillSettings, schedule: &NoiseSchedule, rng: &mut impl Rng) -> Result<Noised, DistillError> {
    let latent = settings.codec.encode(state.image())?;
    let sample = TimestepSample::draw(rng, latent.shape(), &settings.timesteps, schedule);
    let noisy = add_noise(&latent, &sample, schedule)?;
    Ok(Noised { latent, sample, noisy })
}

/// Pulls a latent-space residual `eps_a - eps_b` back to the parameters.
fn finish(
    rule: Rule,
    state: &dyn RenderState,
    settings: &DistillSettings,
    sample: &TimestepSample,
    eps_a: &Latent,
    eps_b: &Latent,
    start: Instant,
) -> Result<DistillStep, DistillError> {
    eps_a.check_shape(eps_b)?;
    let residual: Vec<f64> = eps_a.data.iter().zip(&eps_b.data).map(|(a, b)| a - b).collect();
    let residual_norm = residual.iter().map(|v| v * v).sum::<f64>().sqrt();
    let upstream = Latent {
        data: residual.iter().map(|r| sample.weight * r).collect(),
        ..*eps_a
    };
    let image_grad = settings.codec.encode_adjoint(&upstream);
    let mut gradients = state.backward(&image_grad)?;
    let grad_norms = gradients.norms();
    let norm = gradients.global_norm();
    let clipped = match settings.clip_norm {
        Some(max) if norm > max => {
            gradients.scale(max / norm);
            true
        }
        _ => false,
    };
    Ok(DistillStep {
        gradients,
        report: DistillStepReport {
            rule,
            t: sample.t,
            weight: sample.weight,
            residual_norm,
            duration_secs: start.elapsed().as_secs_f64().max(1e-9),
            grad_norms,
            clipped,
            residual_loss: None,
        },
    })
}

fn predict(rule: Rule, denoiser: &dyn Denoiser, noisy: &Latent, t: usize, cond: &DenoiserCondition) -> Result<Latent, DistillError> {
    denoiser
        .predict(noisy, t, cond)
        .map_err(|source| DistillError::Denoiser { rule, t, source })
}

/// Score distillation: upstream `w(t) * (eps_hat(z_t; cond, t) - eps)`.
pub fn sds_grad(
    state: &dyn RenderState,
    denoiser: &dyn Denoiser,
    cond: &DenoiserCondition,
    schedule: &NoiseSchedule,
    settings: &DistillSettings,
    rng: &mut impl Rng,
) -> Result<DistillStep, DistillError> {
    sds_like(Rule::Sds, state, denoiser, cond, schedule, settings, rng)
}

fn sds_like(
    rule: Rule,
    state: &dyn RenderState,
    denoiser: &dyn Denoiser,
    cond: &DenoiserCondition,
    schedule: &NoiseSchedule,
    settings: &DistillSettings,
    rng: &mut impl Rng,
) -> Result<DistillStep, DistillError> {
    let start = Instant::now();
    let n = noise_render(state, settings, schedule, rng)?;
    let eps_hat = predict(rule, denoiser, &n.noisy, n.sample.t, cond)?;
    finish(rule, state, settings, &n.sample, &eps_hat, &n.sample.eps, start)
}

/// Variational score distillation: upstream
/// `w(t) * (eps_pretrain(z_t; y, t) - eps_phi(z_t; y, t, c))`, where the
/// pretrained model is the residual model's base. Afterwards the residual
/// model takes `settings.vsd_train_ratio` training steps on the detached
/// render latent.
pub fn vsd_grad(
    state: &dyn RenderState,
    residual: &mut ResidualScoreModel,
    cond: &DenoiserCondition,
    schedule: &NoiseSchedule,
    settings: &DistillSettings,
    rng: &mut impl Rng,
) -> Result<DistillStep, DistillError> {
    if cond.camera.is_none() {
        return Err(DistillError::MissingCondition("camera"));
    }
    let start = Instant::now();
    let n = noise_render(state, settings, schedule, rng)?;
    let eps_pre = predict(Rule::Vsd, residual.base(), &n.noisy, n.sample.t, cond)?;
    let eps_phi = predict(Rule::Vsd, residual, &n.noisy, n.sample.t, cond)?;
    let mut step = finish(Rule::Vsd, state, settings, &n.sample, &eps_pre, &eps_phi, start)?;
    let mut loss = None;
    for _ in 0..settings.vsd_train_ratio {
        let t = n.sample.t;
        loss = Some(
            residual
                .train_residual_step(&n.latent, cond, schedule, rng)
                .map_err(|source| DistillError::Denoiser { rule: Rule::Vsd, t, source })?,
        );
    }
    step.report.residual_loss = loss;
    step.report.duration_secs = start.elapsed().as_secs_f64().max(1e-9);
    Ok(step)
}

/// View-conditioned distillation of a volume render taken from
/// `apply_relative(default_camera, rel)`, conditioned on `(reference, rel)`.
#[allow(clippy::too_many_arguments)]
pub fn zero123_sds_grad(
    state: &VolumeState<'_>,
    denoiser: &dyn Denoiser,
    reference: &Image,
    rel: &RelativePose,
    default_camera: &CameraPose,
    schedule: &NoiseSchedule,
    settings: &DistillSettings,
    rng: &mut impl Rng,
) -> Result<DistillStep, DistillError> {
    if !apply_relative(default_camera, rel).approx_eq(&state.camera, POSE_TOLERANCE) {
        return Err(DistillError::PoseMismatch);
    }
    let cond = DenoiserCondition {
        reference_image: Some(reference.clone()),
        relative_pose: Some(rel.clone()),
        camera: Some(state.camera.clone()),
        ..DenoiserCondition::default()
    };
    sds_like(Rule::Zero123Sds, state, denoiser, &cond, schedule, settings, rng)
}

/// Image-prompt distillation of the normal map: upstream
/// `w(t) * (eps_ip(z_n; y_n, y, t) - eps)` into `(S, ΔV)`.
pub fn ipsd_geo_grad(
    state: &MeshState<'_>,
    denoiser: &dyn Denoiser,
    y_n: &ImagePromptEmbedding,
    y: &[f64],
    schedule: &NoiseSchedule,
    settings: &DistillSettings,
    rng: &mut impl Rng,
) -> Result<DistillStep, DistillError> {
    if state.mesh.is_empty() {
        return Err(DistillError::DegenerateGeometry);
    }
    assert_eq!(state.channel, MeshChannel::Normal, "geometry distillation needs a normal-map render");
    let cond = DenoiserCondition {
        image_prompt: Some(y_n.clone()),
        camera: Some(state.camera().clone()),
        ..DenoiserCondition::text(y.to_vec())
    };
    sds_like(Rule::IpsdGeo, state, denoiser, &cond, schedule, settings, rng)
}

/// Image-prompt distillation of the rgb render conditioned on
/// `y_rgb + delta_geo`. `delta_geo` must have been built for the render's
/// viewpoint; an untagged difference is accepted only if it is all zeros.
#[allow(clippy::too_many_arguments)]
pub fn ipsd_tex_grad(
    state: &MeshState<'_>,
    denoiser: &dyn Denoiser,
    y_rgb: &ImagePromptEmbedding,
    delta_geo: &GeometryPromptDifference,
    y: &[f64],
    schedule: &NoiseSchedule,
    settings: &DistillSettings,
    rng: &mut impl Rng,
) -> Result<DistillStep, DistillError> {
    if state.mesh.is_empty() {
        return Err(DistillError::DegenerateGeometry);
    }
    assert_eq!(state.channel, MeshChannel::Rgb, "texture distillation needs an rgb render");
    match &delta_geo.random_view {
        Some(view) if !view.approx_eq(state.camera(), POSE_TOLERANCE) => return Err(DistillError::StaleDelta),
        None if delta_geo.vector.iter().any(|v| *v != 0.0) => return Err(DistillError::StaleDelta),
        _ => {}
    }
    let cond = DenoiserCondition {
        image_prompt: Some(compensate(y_rgb, delta_geo)?),
        camera: Some(state.camera().clone()),
        ..DenoiserCondition::text(y.to_vec())
    };
    sds_like(Rule::IpsdTex, state, denoiser, &cond, schedule, settings, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{DeltaTargetDenoiser, Weighting};
    use crate::optim::Adam;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_settings() -> DistillSettings {
        DistillSettings {
            timesteps: TimestepConfig {
                weighting: Weighting::Unit,
                ..TimestepConfig::default()
            },
            clip_norm: None,
            ..DistillSettings::default()
        }
    }

    #[test]
    fn fixed_point_gives_zero_gradient() {
        let img = Image::from_fn(4, 4, |x, y| [x as f64 / 4.0, y as f64 / 4.0, 0.5]);
        let schedule = NoiseSchedule::default();
        let d = DeltaTargetDenoiser::new(Codec::Identity.encode(&img).unwrap(), schedule.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let state = ImageState { image: img };
        for _ in 0..20 {
            let step = sds_grad(&state, &d, &DenoiserCondition::default(), &schedule, &unit_settings(), &mut rng).unwrap();
            assert!(step.gradients.max_abs() < 1e-6);
        }
    }

    #[test]
    fn constant_gap_closed_form() {
        // abar_1 = 0.64, gap 0.3 -> upstream 0.4 per element
        let schedule = NoiseSchedule::from_betas(vec![0.36, 0.5]).unwrap();
        let settings = DistillSettings {
            timesteps: TimestepConfig {
                t_min: 1,
                t_max: 1,
                weighting: Weighting::Unit,
            },
            clip_norm: None,
            ..DistillSettings::default()
        };
        let state = ImageState {
            image: Image::filled(2, 2, [0.5; 3]),
        };
        let d = DeltaTargetDenoiser::new(Latent::filled([3, 2, 2], 0.2), schedule.clone());
        let step = sds_grad(&state, &d, &DenoiserCondition::default(), &schedule, &settings, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert!(step.gradients.get(ParamGroup::Pixels).unwrap().iter().all(|g| (g - 0.4).abs() < 1e-12));
        assert_eq!(step.report.t, 1);
        assert!(step.report.duration_secs > 0.0);
    }

    #[test]
    fn identity_generator_converges() {
        let schedule = NoiseSchedule::default();
        let target = Image::from_fn(8, 8, |x, y| [0.2 + 0.6 * (x as f64 / 7.0), 0.7, 0.1 + 0.05 * y as f64]);
        let d = DeltaTargetDenoiser::new(Codec::Identity.encode(&target).unwrap(), schedule.clone());
        let mut state = ImageState {
            image: Image::filled(8, 8, [0.5; 3]),
        };
        let mut opt = Adam::new(state.image.pixels.len(), 0.02);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let settings = DistillSettings::default();
        let hash = d.state_hash();
        for _ in 0..200 {
            let step = sds_grad(&state, &d, &DenoiserCondition::default(), &schedule, &settings, &mut rng).unwrap();
            opt.update(&mut state.image.pixels, step.gradients.get(ParamGroup::Pixels).unwrap());
        }
        assert_eq!(d.state_hash(), hash);
        assert!(state.image.mse(&target) < 1e-4, "{}", state.image.mse(&target));
    }

    #[test]
    fn clipping_caps_global_norm() {
        let schedule = NoiseSchedule::default();
        let d = DeltaTargetDenoiser::new(Latent::filled([3, 8, 8], 5.0), schedule.clone());
        let state = ImageState {
            image: Image::filled(8, 8, [0.0; 3]),
        };
        let step = sds_grad(
            &state,
            &d,
            &DenoiserCondition::default(),
            &schedule,
            &DistillSettings::default(),
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        assert!(step.report.clipped);
        assert!((step.gradients.global_norm() - 10.0).abs() < 1e-9);
    }
}
