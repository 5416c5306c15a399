//! Closed-form denoisers.
//!
//! Every oracle here is the exact conditional denoiser of a point-mass data
//! distribution at some target latent:
//! `eps_hat(z_t) = (z_t - sqrt(abar_t) * target) / sqrt(1 - abar_t)`.
//! Substituting `z_t = sqrt(abar_t) z + sqrt(1 - abar_t) eps` gives
//! `eps_hat - eps = sqrt(abar_t / (1 - abar_t)) * (z - target)`, so score
//! distillation against an oracle is noise-free gradient descent toward its
//! target. The oracles differ only in how they pick the target.

use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use super::{Codec, Denoiser, DenoiserCondition, DenoiserKind, DiffusionError, Latent, NoiseSchedule};
use crate::math::{self, Vec3};
use crate::prompts::ImagePromptEmbedding;
use crate::render_volume::{apply_relative, CameraPose, Image};

fn delta_eps(noisy: &Latent, target: &Latent, t: usize, schedule: &NoiseSchedule) -> Result<Latent, DiffusionError> {
    schedule.check_t(t)?;
    target.check_shape(noisy)?;
    let ab = schedule.alpha_bar(t);
    let (a, inv_b) = (ab.sqrt(), 1.0 / (1.0 - ab).sqrt());
    Ok(Latent {
        data: noisy.data.iter().zip(&target.data).map(|(z, x)| (z - a * x) * inv_b).collect(),
        ..*noisy
    })
}

fn hash_latent(latent: &Latent, h: &mut impl Hasher) {
    latent.shape().hash(h);
    for v in &latent.data {
        v.to_bits().hash(h);
    }
}

/// Exact denoiser of the point mass at `target`; ignores the condition.
#[derive(Debug, Clone)]
pub struct DeltaTargetDenoiser {
    pub target: Latent,
    pub schedule: NoiseSchedule,
    pub kind: DenoiserKind,
}

impl DeltaTargetDenoiser {
    pub fn new(target: Latent, schedule: NoiseSchedule) -> Self {
        Self {
            target,
            schedule,
            kind: DenoiserKind::Pretrain,
        }
    }

    pub fn with_kind(mut self, kind: DenoiserKind) -> Self {
        self.kind = kind;
        self
    }
}

impl Denoiser for DeltaTargetDenoiser {
    fn kind(&self) -> DenoiserKind {
        self.kind
    }

    fn predict(&self, noisy: &Latent, t: usize, _cond: &DenoiserCondition) -> Result<Latent, DiffusionError> {
        delta_eps(noisy, &self.target, t, &self.schedule)
    }

    fn state_hash(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        hash_latent(&self.target, &mut h);
        h.finish()
    }

    fn boxed_clone(&self) -> Box<dyn Denoiser> {
        Box::new(self.clone())
    }
}

/// Axis-aligned colored box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColoredBox {
    pub min: Vec3,
    pub max: Vec3,
    pub color: [f64; 3],
}

/// Ground-truth scenes the view-conditioned oracle can render exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AnalyticScene {
    /// Sphere at the origin; the `z >= 0` half is `front`, the rest `back`.
    HemisphereSphere { radius: f64, front: [f64; 3], back: [f64; 3] },
    Boxes { boxes: Vec<ColoredBox> },
}

struct SurfaceHit {
    t: f64,
    color: [f64; 3],
    normal: Vec3,
}

impl AnalyticScene {
    /// The red/blue two-hemisphere sphere used by the acceptance scenes.
    pub fn red_blue_sphere(radius: f64) -> Self {
        AnalyticScene::HemisphereSphere {
            radius,
            front: [1.0, 0.0, 0.0],
            back: [0.0, 0.0, 1.0],
        }
    }

    fn hit(&self, origin: Vec3, dir: Vec3) -> Option<SurfaceHit> {
        match self {
            AnalyticScene::HemisphereSphere { radius, front, back } => {
                let b = math::dot(origin, dir);
                let c = math::dot(origin, origin) - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = if -b - sq > 0.0 { -b - sq } else { -b + sq };
                if t <= 0.0 {
                    return None;
                }
                let p = math::add(origin, math::scale(dir, t));
                Some(SurfaceHit {
                    t,
                    color: if p[2] >= 0.0 { *front } else { *back },
                    normal: math::scale(p, 1.0 / radius),
                })
            }
            AnalyticScene::Boxes { boxes } => {
                let mut best: Option<SurfaceHit> = None;
                for bx in boxes {
                    let mut t0 = 0.0f64;
                    let mut t1 = f64::INFINITY;
                    let mut axis = 0;
                    let mut sign = 1.0;
                    let mut ok = true;
                    for a in 0..3 {
                        if dir[a].abs() < 1e-15 {
                            if origin[a] < bx.min[a] || origin[a] > bx.max[a] {
                                ok = false;
                            }
                            continue;
                        }
                        let inv = 1.0 / dir[a];
                        let (ta, tb) = ((bx.min[a] - origin[a]) * inv, (bx.max[a] - origin[a]) * inv);
                        let (near, far, s) = if ta < tb { (ta, tb, -1.0) } else { (tb, ta, 1.0) };
                        if near > t0 {
                            t0 = near;
                            axis = a;
                            sign = s;
                        }
                        t1 = t1.min(far);
                    }
                    if !ok || t1 < t0 || t0 <= 0.0 {
                        continue;
                    }
                    if best.as_ref().is_none_or(|b| t0 < b.t) {
                        let mut normal = [0.0; 3];
                        normal[axis] = sign;
                        best = Some(SurfaceHit {
                            t: t0,
                            color: bx.color,
                            normal,
                        });
                    }
                }
                best
            }
        }
    }

    /// Signed distance (sphere) or box-union distance bound; negative inside.
    pub fn sdf(&self, p: Vec3) -> f64 {
        match self {
            AnalyticScene::HemisphereSphere { radius, .. } => math::norm(p) - radius,
            AnalyticScene::Boxes { boxes } => boxes
                .iter()
                .map(|b| {
                    let mut outside = [0.0; 3];
                    let mut inside: f64 = f64::NEG_INFINITY;
                    for a in 0..3 {
                        let c = 0.5 * (b.min[a] + b.max[a]);
                        let h = 0.5 * (b.max[a] - b.min[a]);
                        let q = (p[a] - c).abs() - h;
                        outside[a] = q.max(0.0);
                        inside = inside.max(q);
                    }
                    math::norm(outside) + inside.min(0.0)
                })
                .fold(f64::INFINITY, f64::min),
        }
    }

    /// Color of the surface point nearest to `p` along the scene's own
    /// partition (used to seed color fields).
    pub fn color_at(&self, p: Vec3) -> [f64; 3] {
        match self {
            AnalyticScene::HemisphereSphere { front, back, .. } => {
                if p[2] >= 0.0 {
                    *front
                } else {
                    *back
                }
            }
            AnalyticScene::Boxes { boxes } => boxes
                .iter()
                .find(|b| (0..3).all(|a| p[a] >= b.min[a] && p[a] <= b.max[a]))
                .map(|b| b.color)
                .unwrap_or([1.0; 3]),
        }
    }

    /// Ray-cast render with `supersample²` rays per pixel.
    pub fn render(&self, cam: &CameraPose, background: [f64; 3], supersample: usize) -> Image {
        self.render_with(cam, supersample, |hit| match hit {
            Some(h) => h.color,
            None => background,
        })
    }

    /// Camera-space normal map, `n * 0.5 + 0.5`, with `(0.5, 0.5, 1)` where
    /// nothing is hit.
    pub fn render_normals(&self, cam: &CameraPose, supersample: usize) -> Image {
        self.render_with(cam, supersample, |hit| match hit {
            Some(h) => math::mat_t_vec(&cam.rotation, h.normal).map(|v| v * 0.5 + 0.5),
            None => [0.5, 0.5, 1.0],
        })
    }

    fn render_with(&self, cam: &CameraPose, supersample: usize, shade: impl Fn(Option<SurfaceHit>) -> [f64; 3]) -> Image {
        let s = supersample.max(1);
        let inv = 1.0 / (s * s) as f64;
        Image::from_fn(cam.width, cam.height, |x, y| {
            let mut acc = [0.0; 3];
            for sy in 0..s {
                for sx in 0..s {
                    let u = x as f64 + (sx as f64 + 0.5) / s as f64;
                    let v = y as f64 + (sy as f64 + 0.5) / s as f64;
                    let c = shade(self.hit(cam.position, cam.ray_through(u, v)));
                    for k in 0..3 {
                        acc[k] += c[k] * inv;
                    }
                }
            }
            acc.map(|v| v.clamp(0.0, 1.0))
        })
    }
}

/// View-conditioned oracle: for a condition carrying the relative pose
/// `(R, T)`, renders its ground-truth scene from `apply_relative(default,
/// (R, T))` and denoises toward the encoded render.
#[derive(Debug, Clone)]
pub struct Zero123Oracle {
    pub scene: AnalyticScene,
    pub default_camera: CameraPose,
    pub codec: Codec,
    pub background: [f64; 3],
    pub supersample: usize,
    pub schedule: NoiseSchedule,
}

impl Zero123Oracle {
    pub fn new(scene: AnalyticScene, default_camera: CameraPose, codec: Codec, schedule: NoiseSchedule) -> Self {
        Self {
            scene,
            default_camera,
            codec,
            background: [1.0; 3],
            supersample: 1,
            schedule,
        }
    }

    /// Target latent for a condition.
    pub fn target(&self, cond: &DenoiserCondition) -> Result<Latent, DiffusionError> {
        let rel = cond.relative_pose.as_ref().ok_or(DiffusionError::MissingCondition("relative_pose"))?;
        let cam = apply_relative(&self.default_camera, rel);
        self.codec.encode(&self.scene.render(&cam, self.background, self.supersample))
    }
}

impl Denoiser for Zero123Oracle {
    fn kind(&self) -> DenoiserKind {
        DenoiserKind::Zero123
    }

    fn predict(&self, noisy: &Latent, t: usize, cond: &DenoiserCondition) -> Result<Latent, DiffusionError> {
        let target = self.target(cond)?;
        delta_eps(noisy, &target, t, &self.schedule)
    }

    fn state_hash(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        serde_json::to_string(&self.scene).unwrap_or_default().hash(&mut h);
        h.finish()
    }

    fn boxed_clone(&self) -> Box<dyn Denoiser> {
        Box::new(self.clone())
    }
}

/// Linear map from a patch-mean embedding to a latent: every latent pixel
/// takes the mean of the patch it falls in. It is the right inverse of the
/// embedder on patch-constant images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchDecoder {
    pub patches: usize,
    pub latent_height: usize,
    pub latent_width: usize,
}

impl PatchDecoder {
    pub fn decode(&self, embedding: &ImagePromptEmbedding) -> Result<Latent, DiffusionError> {
        let p = self.patches;
        if embedding.patches != p || embedding.len() != 3 * p * p {
            return Err(DiffusionError::Protocol(format!(
                "embedding with {} patches / {} entries does not match decoder with {p} patches",
                embedding.patches,
                embedding.len()
            )));
        }
        if self.latent_width % p != 0 || self.latent_height % p != 0 {
            return Err(DiffusionError::Shape {
                expected: [3, p, p],
                actual: [3, self.latent_height, self.latent_width],
            });
        }
        let (pw, ph) = (self.latent_width / p, self.latent_height / p);
        let mut latent = Latent::zeros(3, self.latent_height, self.latent_width);
        for c in 0..3 {
            for y in 0..self.latent_height {
                for x in 0..self.latent_width {
                    let patch = (x / pw) * p + y / ph;
                    latent.data[(c * self.latent_height + y) * self.latent_width + x] = embedding.vector[patch * 3 + c];
                }
            }
        }
        Ok(latent)
    }
}

/// Image-prompt oracle: decodes `cond.image_prompt` to a target latent. The
/// text embedding is ignored.
#[derive(Debug, Clone)]
pub struct ImagePromptOracle {
    pub decoder: PatchDecoder,
    pub schedule: NoiseSchedule,
}

impl ImagePromptOracle {
    pub fn new(decoder: PatchDecoder, schedule: NoiseSchedule) -> Self {
        Self { decoder, schedule }
    }

    pub fn target(&self, cond: &DenoiserCondition) -> Result<Latent, DiffusionError> {
        let prompt = cond.image_prompt.as_ref().ok_or(DiffusionError::MissingCondition("image_prompt"))?;
        self.decoder.decode(prompt)
    }
}

impl Denoiser for ImagePromptOracle {
    fn kind(&self) -> DenoiserKind {
        DenoiserKind::ImagePrompt
    }

    fn predict(&self, noisy: &Latent, t: usize, cond: &DenoiserCondition) -> Result<Latent, DiffusionError> {
        let target = self.target(cond)?;
        delta_eps(noisy, &target, t, &self.schedule)
    }

    fn boxed_clone(&self) -> Box<dyn Denoiser> {
        Box::new(self.clone())
    }
}
