//! Pinhole cameras and the differentiable ray-marching renderer over a
//! density + color voxel pair.
//!
//! Compositing follows the usual emission-absorption model:
//! `alpha_i = 1 - exp(-softplus(sigma_i) * delta_i)`, transmittance
//! `T_i = prod_{j<i} (1 - alpha_j)`, and
//! `pixel = sum_i T_i * alpha_i * c_i + T_final * background`.
//! [`render_backward`] is the exact reverse-mode derivative of that formula
//! with respect to both grids.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fields::Grid3;
use crate::math::{self, Mat3, Vec3};

#[derive(Debug, Error, PartialEq)]
pub enum CameraError {
    #[error("rotation is not orthonormal (error {0:.3e})")]
    NotOrthonormal(f64),
    #[error("rotation has determinant {0}, expected +1")]
    Reflection(f64),
    #[error("fov_y {0} outside (10, 120) degrees")]
    Fov(f64),
    #[error("image size {0}x{1} must be positive")]
    Size(usize, usize),
    #[error("invalid camera policy: {0}")]
    Policy(String),
}

/// World-from-camera pose of a pinhole camera looking down its local `-z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub rotation: Mat3,
    pub position: Vec3,
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
}

/// Rigid motion taking one camera pose to another, expressed in world frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativePose {
    #[serde(rename = "R")]
    pub rotation: Mat3,
    #[serde(rename = "T")]
    pub translation: Vec3,
}

/// RGB image with pixels in `[0, 1]`, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.pixels.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut img = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.set(x, y, f(x, y));
            }
        }
        img
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn mse(&self, other: &Image) -> f64 {
        assert_eq!(self.pixels.len(), other.pixels.len(), "image sizes differ");
        let n = self.pixels.len() as f64;
        self.pixels.iter().zip(&other.pixels).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n
    }

    pub fn psnr(&self, other: &Image) -> f64 {
        -10.0 * self.mse(other).log10()
    }

    pub fn is_valid(&self) -> bool {
        self.pixels.len() == self.width * self.height * 3
            && self.pixels.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }
}

impl CameraPose {
    pub fn new(rotation: Mat3, position: Vec3, fov_y: f64, width: usize, height: usize) -> Result<Self, CameraError> {
        let err = math::orthonormality_error(&rotation);
        if err > 1e-6 {
            return Err(CameraError::NotOrthonormal(err));
        }
        let d = math::det(&rotation);
        if (d - 1.0).abs() > 1e-6 {
            return Err(CameraError::Reflection(d));
        }
        if !(fov_y > 10.0 && fov_y < 120.0) {
            return Err(CameraError::Fov(fov_y));
        }
        if width == 0 || height == 0 {
            return Err(CameraError::Size(width, height));
        }
        Ok(Self {
            rotation,
            position,
            fov_y,
            width,
            height,
        })
    }

    /// Camera at `position` looking at the origin with `+y` up.
    pub fn look_at_origin(position: Vec3, fov_y: f64, width: usize, height: usize) -> Result<Self, CameraError> {
        let forward = math::normalize(math::scale(position, -1.0));
        let right = math::normalize(math::cross(forward, [0.0, 1.0, 0.0]));
        let up = math::cross(right, forward);
        let back = math::scale(forward, -1.0);
        // columns: right, up, back
        let rotation = [
            [right[0], up[0], back[0]],
            [right[1], up[1], back[1]],
            [right[2], up[2], back[2]],
        ];
        Self::new(rotation, position, fov_y, width, height)
    }

    /// Orbit pose at the given azimuth/elevation (degrees) and radius.
    /// Azimuth 0 sits on `+z`, azimuth 90 on `+x`.
    pub fn orbit(
        azimuth_deg: f64,
        elevation_deg: f64,
        radius: f64,
        fov_y: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, CameraError> {
        let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        let position = [
            radius * el.cos() * az.sin(),
            radius * el.sin(),
            radius * el.cos() * az.cos(),
        ];
        Self::look_at_origin(position, fov_y, width, height)
    }

    pub fn forward(&self) -> Vec3 {
        [-self.rotation[0][2], -self.rotation[1][2], -self.rotation[2][2]]
    }

    fn tan_half(&self) -> f64 {
        (self.fov_y.to_radians() * 0.5).tan()
    }

    fn aspect(&self) -> f64 {
        self.width as f64 / self.height as f64
    }

    /// Unit world-space direction through the centre of pixel `(x, y)`
    /// (row 0 at the top).
    pub fn ray_direction(&self, x: usize, y: usize) -> Vec3 {
        self.ray_through(x as f64 + 0.5, y as f64 + 0.5)
    }

    /// Unit direction through continuous pixel coordinates `(sx, sy)`.
    pub fn ray_through(&self, sx: f64, sy: f64) -> Vec3 {
        let th = self.tan_half();
        let cx = (sx / self.width as f64 * 2.0 - 1.0) * th * self.aspect();
        let cy = (1.0 - sy / self.height as f64 * 2.0) * th;
        math::normalize(math::mat_vec(&self.rotation, [cx, cy, -1.0]))
    }

    pub fn world_to_camera(&self, p: Vec3) -> Vec3 {
        math::mat_t_vec(&self.rotation, math::sub(p, self.position))
    }

    /// Continuous pixel coordinates and view depth of a world point, or `None`
    /// when the point is not in front of the camera.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64, f64)> {
        let c = self.world_to_camera(p);
        let depth = -c[2];
        if depth <= 1e-9 {
            return None;
        }
        let th = self.tan_half();
        let sx = (c[0] / depth / (th * self.aspect()) + 1.0) * 0.5 * self.width as f64;
        let sy = (1.0 - c[1] / depth / th) * 0.5 * self.height as f64;
        Some((sx, sy, depth))
    }

    /// Whether two poses coincide to `tol` in every entry.
    pub fn approx_eq(&self, other: &CameraPose, tol: f64) -> bool {
        let rot = (0..3).all(|i| (0..3).all(|j| (self.rotation[i][j] - other.rotation[i][j]).abs() <= tol));
        let pos = (0..3).all(|i| (self.position[i] - other.position[i]).abs() <= tol);
        rot && pos && self.width == other.width && self.height == other.height
    }
}

impl RelativePose {
    pub fn identity() -> Self {
        Self {
            rotation: math::IDENTITY3,
            translation: [0.0; 3],
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self, CameraError> {
        let err = math::orthonormality_error(&rotation);
        if err > 1e-6 {
            return Err(CameraError::NotOrthonormal(err));
        }
        let d = math::det(&rotation);
        if (d - 1.0).abs() > 1e-6 {
            return Err(CameraError::Reflection(d));
        }
        Ok(Self { rotation, translation })
    }

    /// Rotation about world `+y` by `degrees`.
    pub fn yaw(degrees: f64) -> Self {
        Self {
            rotation: math::rotation_y(degrees.to_radians()),
            translation: [0.0; 3],
        }
    }

    /// `self` applied after `first`.
    pub fn compose(&self, first: &RelativePose) -> RelativePose {
        RelativePose {
            rotation: math::mat_mul(&self.rotation, &first.rotation),
            translation: math::add(math::mat_vec(&self.rotation, first.translation), self.translation),
        }
    }
}

/// Moves `default` by the world-frame motion `rel`: the new pose has
/// rotation `R · R_default` and position `R · p_default + T`.
pub fn apply_relative(default: &CameraPose, rel: &RelativePose) -> CameraPose {
    CameraPose {
        rotation: math::mat_mul(&rel.rotation, &default.rotation),
        position: math::add(math::mat_vec(&rel.rotation, default.position), rel.translation),
        fov_y: default.fov_y,
        width: default.width,
        height: default.height,
    }
}

/// Inverse of [`apply_relative`]: the motion taking `from` to `to`.
pub fn solve_relative(from: &CameraPose, to: &CameraPose) -> RelativePose {
    let rotation = math::mat_mul(&to.rotation, &math::transpose(&from.rotation));
    let translation = math::sub(to.position, math::mat_vec(&rotation, from.position));
    RelativePose { rotation, translation }
}

/// Distribution of random viewpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraPolicy {
    /// Degrees, half-open `[lo, hi)`.
    pub azimuth: [f64; 2],
    pub elevation: [f64; 2],
    pub radius: f64,
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for CameraPolicy {
    fn default() -> Self {
        Self {
            azimuth: [0.0, 360.0],
            elevation: [-10.0, 45.0],
            radius: 2.2,
            fov_y: 50.0,
            width: 64,
            height: 64,
        }
    }
}

impl CameraPolicy {
    pub fn validate(&self) -> Result<(), CameraError> {
        let bad = |m: &str| Err(CameraError::Policy(m.to_string()));
        if !(self.azimuth[0] <= self.azimuth[1]) || self.azimuth[1] - self.azimuth[0] > 360.0 {
            return bad("azimuth range must satisfy lo <= hi and span at most 360 degrees");
        }
        if !(self.elevation[0] <= self.elevation[1]) || self.elevation[0] <= -89.0 || self.elevation[1] >= 89.0 {
            return bad("elevation range must be ordered and inside (-89, 89)");
        }
        if !(self.radius > 0.0) || !self.radius.is_finite() {
            return bad("radius must be positive");
        }
        if !(self.fov_y > 10.0 && self.fov_y < 120.0) {
            return Err(CameraError::Fov(self.fov_y));
        }
        if self.width == 0 || self.height == 0 {
            return Err(CameraError::Size(self.width, self.height));
        }
        Ok(())
    }

    pub fn pose(&self, azimuth_deg: f64, elevation_deg: f64) -> Result<CameraPose, CameraError> {
        CameraPose::orbit(azimuth_deg, elevation_deg, self.radius, self.fov_y, self.width, self.height)
    }
}

/// Draws a look-at-origin pose from `policy`.
pub fn sample_camera(rng: &mut impl Rng, policy: &CameraPolicy) -> Result<CameraPose, CameraError> {
    policy.validate()?;
    let u: f64 = rng.random();
    let v: f64 = rng.random();
    let az = policy.azimuth[0] + u * (policy.azimuth[1] - policy.azimuth[0]);
    let el = policy.elevation[0] + v * (policy.elevation[1] - policy.elevation[0]);
    policy.pose(az, el)
}

/// `n` poses evenly spaced in azimuth, for turntable renders.
pub fn turntable(policy: &CameraPolicy, n: usize, elevation_deg: f64) -> Result<Vec<CameraPose>, CameraError> {
    (0..n).map(|i| policy.pose(360.0 * i as f64 / n as f64, elevation_deg)).collect()
}

/// Ray marching parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeSettings {
    pub steps: usize,
    pub background: [f64; 3],
    /// Seed for per-stratum jitter; `None` samples stratum midpoints.
    pub jitter_seed: Option<u64>,
    /// Row chunks rendered in parallel. With 1 the backward reduction order
    /// is fixed; any fixed value is deterministic but sums differ between
    /// values.
    pub workers: usize,
}

impl Default for VolumeSettings {
    fn default() -> Self {
        Self {
            steps: 64,
            background: [1.0; 3],
            jitter_seed: None,
            workers: 1,
        }
    }
}

/// Gradients of a scalar loss with respect to the raw grid values.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGradients {
    pub density: Vec<f64>,
    pub color: Vec<f64>,
}

/// Slab intersection of a ray with `[-1, 1]³`, clipped to `t >= 0`.
pub fn intersect_unit_cube(origin: Vec3, dir: Vec3) -> Option<(f64, f64)> {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a].abs() > 1.0 {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut ta, mut tb) = ((-1.0 - origin[a]) * inv, (1.0 - origin[a]) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t1 > t0).then_some((t0, t1))
}

fn jitter(seed: u64, pixel: usize, step: usize) -> f64 {
    // splitmix64 over (seed, pixel, step)
    let mut z = seed
        .wrapping_add((pixel as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((step as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

struct RaySample {
    density_stencil: Option<crate::fields::Stencil>,
    color_stencil: Option<crate::fields::Stencil>,
    raw_sigma: f64,
    alpha: f64,
    transmittance: f64,
    color: [f64; 3],
}

struct RayTrace {
    samples: Vec<RaySample>,
    delta: f64,
    final_transmittance: f64,
    raw_pixel: [f64; 3],
}

fn trace_ray(density: &Grid3, color: &Grid3, cam: &CameraPose, settings: &VolumeSettings, x: usize, y: usize) -> RayTrace {
    let dir = cam.ray_direction(x, y);
    let bg = settings.background;
    let Some((near, far)) = intersect_unit_cube(cam.position, dir) else {
        return RayTrace {
            samples: Vec::new(),
            delta: 0.0,
            final_transmittance: 1.0,
            raw_pixel: bg,
        };
    };
    let n = settings.steps;
    let delta = (far - near) / n as f64;
    let pixel_index = y * cam.width + x;
    let mut samples = Vec::with_capacity(n);
    let mut t_acc = 1.0;
    let mut raw_pixel = [0.0; 3];
    let mut sigma_buf = [0.0];
    let mut color_buf = [0.0; 3];
    for i in 0..n {
        let u = settings.jitter_seed.map_or(0.5, |s| jitter(s, pixel_index, i));
        let t = near + (i as f64 + u) * delta;
        let p = math::add(cam.position, math::scale(dir, t));
        let density_stencil = density.sample_into(p, &mut sigma_buf);
        let color_stencil = color.sample_into(p, &mut color_buf);
        let raw_sigma = sigma_buf[0];
        let alpha = 1.0 - (-math::softplus(raw_sigma) * delta).exp();
        let w = t_acc * alpha;
        for c in 0..3 {
            raw_pixel[c] += w * color_buf[c];
        }
        samples.push(RaySample {
            density_stencil,
            color_stencil,
            raw_sigma,
            alpha,
            transmittance: t_acc,
            color: color_buf,
        });
        t_acc *= 1.0 - alpha;
    }
    for c in 0..3 {
        raw_pixel[c] += t_acc * bg[c];
    }
    RayTrace {
        samples,
        delta,
        final_transmittance: t_acc,
        raw_pixel,
    }
}

fn row_chunks(height: usize, workers: usize) -> Vec<std::ops::Range<usize>> {
    let workers = workers.clamp(1, height.max(1));
    let per = height.div_ceil(workers);
    (0..workers)
        .map(|w| (w * per).min(height)..((w + 1) * per).min(height))
        .filter(|r| !r.is_empty())
        .collect()
}

fn check_grids(density: &Grid3, color: &Grid3) {
    assert_eq!(density.channels(), 1, "density grid must be scalar");
    assert_eq!(color.channels(), 3, "color grid must have three channels");
}

/// Renders the radiance field seen from `cam`. Output pixels are clamped to
/// `[0, 1]`.
pub fn render(density: &Grid3, color: &Grid3, cam: &CameraPose, settings: &VolumeSettings) -> Image {
    check_grids(density, color);
    assert!(settings.steps >= 16, "at least 16 ray steps are required");
    let render_rows = |rows: std::ops::Range<usize>| -> Vec<f64> {
        let mut out = Vec::with_capacity(rows.len() * cam.width * 3);
        for y in rows {
            for x in 0..cam.width {
                let tr = trace_ray(density, color, cam, settings, x, y);
                out.extend(tr.raw_pixel.iter().map(|v| v.clamp(0.0, 1.0)));
            }
        }
        out
    };
    let chunks = row_chunks(cam.height, settings.workers);
    let pixels: Vec<f64> = if chunks.len() == 1 {
        render_rows(0..cam.height)
    } else {
        chunks.into_par_iter().map(render_rows).collect::<Vec<_>>().concat()
    };
    Image {
        width: cam.width,
        height: cam.height,
        pixels,
    }
}

/// Per-ray compositing weights `T_i * alpha_i` and the residual
/// transmittance; exposed for diagnostics and tests.
pub fn ray_weights(density: &Grid3, color: &Grid3, cam: &CameraPose, settings: &VolumeSettings, x: usize, y: usize) -> (Vec<f64>, f64) {
    let tr = trace_ray(density, color, cam, settings, x, y);
    (
        tr.samples.iter().map(|s| s.transmittance * s.alpha).collect(),
        tr.final_transmittance,
    )
}

/// Reverse-mode derivative of [`render`]. `upstream` holds dL/dpixel with the
/// image layout.
pub fn render_backward(
    density: &Grid3,
    color: &Grid3,
    cam: &CameraPose,
    settings: &VolumeSettings,
    upstream: &[f64],
) -> VolumeGradients {
    check_grids(density, color);
    assert_eq!(upstream.len(), cam.width * cam.height * 3, "upstream gradient has wrong size");
    let backward_rows = |rows: std::ops::Range<usize>| -> VolumeGradients {
        let mut grads = VolumeGradients {
            density: vec![0.0; density.values().len()],
            color: vec![0.0; color.values().len()],
        };
        for y in rows {
            for x in 0..cam.width {
                let base = (y * cam.width + x) * 3;
                let g_in = &upstream[base..base + 3];
                if g_in.iter().all(|v| *v == 0.0) {
                    continue;
                }
                let tr = trace_ray(density, color, cam, settings, x, y);
                let mut g = [0.0; 3];
                for c in 0..3 {
                    // clamp at the output passes gradient only inside [0, 1]
                    if (0.0..=1.0).contains(&tr.raw_pixel[c]) {
                        g[c] = g_in[c];
                    }
                }
                accumulate_ray(density, color, &tr, g, settings.background, &mut grads);
            }
        }
        grads
    };
    let chunks = row_chunks(cam.height, settings.workers);
    if chunks.len() == 1 {
        return backward_rows(0..cam.height);
    }
    let partials: Vec<VolumeGradients> = chunks.into_par_iter().map(backward_rows).collect();
    let mut iter = partials.into_iter();
    let mut total = iter.next().expect("at least one chunk");
    for part in iter {
        for (a, b) in total.density.iter_mut().zip(part.density) {
            *a += b;
        }
        for (a, b) in total.color.iter_mut().zip(part.color) {
            *a += b;
        }
    }
    total
}

fn accumulate_ray(density: &Grid3, color: &Grid3, tr: &RayTrace, g: [f64; 3], bg: [f64; 3], grads: &mut VolumeGradients) {
    let mut suffix = tr.final_transmittance * (g[0] * bg[0] + g[1] * bg[1] + g[2] * bg[2]);
    for s in tr.samples.iter().rev() {
        let w = s.transmittance * s.alpha;
        let q = g[0] * s.color[0] + g[1] * s.color[1] + g[2] * s.color[2];
        if let Some(st) = &s.color_stencil {
            color.accumulate_backward(st, &[g[0] * w, g[1] * w, g[2] * w], &mut grads.color);
        }
        if let Some(st) = &s.density_stencil {
            let d_sigma = tr.delta * ((1.0 - s.alpha) * s.transmittance * q - suffix);
            let d_raw = d_sigma * math::sigmoid(s.raw_sigma);
            density.accumulate_backward(st, &[d_raw], &mut grads.density);
        }
        suffix += w * q;
    }
}
