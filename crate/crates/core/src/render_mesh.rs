//! Hard z-buffer rasterization of a [`SurfaceMesh`] into RGB and normal maps.
//!
//! Color comes from a volumetric texture (a 3-channel [`Grid3`]) sampled at
//! the interpolated world position of each covered pixel. The backward pass
//! differentiates the per-pixel attribute interpolation with barycentrics and
//! visibility held fixed; silhouette terms are not modeled.

use thiserror::Error;

use crate::fields::Grid3;
use crate::math::{self, Vec3};
use crate::render_volume::{CameraPose, Image};
use crate::tetmesh::SurfaceMesh;

/// Normal-map value written where no surface is visible.
pub const EMPTY_NORMAL: [f64; 3] = [0.5, 0.5, 1.0];

#[derive(Debug, Error, PartialEq)]
pub enum RasterError {
    #[error("raster state does not belong to this mesh/texture/camera")]
    StaleState,
    #[error("upstream gradient has {actual} entries, expected {expected}")]
    UpstreamSize { expected: usize, actual: usize },
    #[error("mesh normals are missing or have the wrong length")]
    MissingNormals,
}

/// Per-pixel bookkeeping kept for the backward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelHit {
    pub face: usize,
    pub bary: [f64; 3],
    pub world: Vec3,
    /// Interpolated (unnormalized) world normal.
    pub normal_sum: Vec3,
    /// Texture value before clamping.
    pub raw_rgb: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct RasterOutput {
    pub rgb: Image,
    pub normal_map: Image,
    /// View depth per pixel, `+inf` where uncovered.
    pub depth: Vec<f64>,
    pub coverage: Vec<bool>,
    pub hits: Vec<Option<PixelHit>>,
    pub camera: CameraPose,
    mesh_key: u64,
}

/// Gradients produced by [`rasterize_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct RasterGradients {
    pub texture: Vec<f64>,
    pub positions: Vec<Vec3>,
    pub normals: Vec<Vec3>,
}

fn mesh_key(mesh: &SurfaceMesh) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    mesh.source.hash(&mut h);
    mesh.faces.hash(&mut h);
    for v in mesh.vertices.iter().chain(&mesh.normals) {
        for c in v {
            c.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

/// Ray/triangle intersection returning `(t, barycentrics)`.
fn intersect(origin: Vec3, dir: Vec3, p0: Vec3, p1: Vec3, p2: Vec3) -> Option<(f64, [f64; 3])> {
    let e1 = math::sub(p1, p0);
    let e2 = math::sub(p2, p0);
    let pv = math::cross(dir, e2);
    let det = math::dot(e1, pv);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let tv = math::sub(origin, p0);
    let u = math::dot(tv, pv) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let qv = math::cross(tv, e1);
    let v = math::dot(dir, qv) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = math::dot(e2, qv) * inv;
    (t > 1e-9).then_some((t, [1.0 - u - v, u, v]))
}

/// Rasterizes `mesh` as seen from `cam`. Uses `mesh.normals` for shading
/// normals.
pub fn rasterize(mesh: &SurfaceMesh, texture: &Grid3, cam: &CameraPose, background: [f64; 3]) -> RasterOutput {
    assert_eq!(texture.channels(), 3, "texture grid must have three channels");
    let (w, h) = (cam.width, cam.height);
    let npx = w * h;
    let mut depth = vec![f64::INFINITY; npx];
    let mut hits: Vec<Option<(usize, f64, [f64; 3])>> = vec![None; npx];

    for (fi, f) in mesh.faces.iter().enumerate() {
        let (p0, p1, p2) = (mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]);
        let proj = [cam.project(p0), cam.project(p1), cam.project(p2)];
        let Some(proj) = proj.iter().copied().collect::<Option<Vec<_>>>() else {
            continue;
        };
        let min_x = proj.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let max_x = proj.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let min_y = proj.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let max_y = proj.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        if max_x < 0.0 || max_y < 0.0 || min_x > w as f64 || min_y > h as f64 {
            continue;
        }
        let x0 = (min_x - 0.5).floor().max(0.0) as usize;
        let x1 = ((max_x - 0.5).ceil().max(0.0) as usize).min(w - 1);
        let y0 = (min_y - 0.5).floor().max(0.0) as usize;
        let y1 = ((max_y - 0.5).ceil().max(0.0) as usize).min(h - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dir = cam.ray_direction(x, y);
                let Some((t, bary)) = intersect(cam.position, dir, p0, p1, p2) else {
                    continue;
                };
                let world = math::add(cam.position, math::scale(dir, t));
                let d = -cam.world_to_camera(world)[2];
                let i = y * w + x;
                if d < depth[i] {
                    depth[i] = d;
                    hits[i] = Some((fi, d, bary));
                }
            }
        }
    }

    let normals_ok = mesh.normals.len() == mesh.vertices.len();
    let mut rgb = Image::filled(w, h, background);
    let mut normal_map = Image::filled(w, h, EMPTY_NORMAL);
    let mut coverage = vec![false; npx];
    let mut pixel_hits = vec![None; npx];
    let mut tex = [0.0; 3];
    for (i, hit) in hits.iter().enumerate() {
        let Some((face, _, bary)) = *hit else { continue };
        let f = mesh.faces[face];
        let world = (0..3).fold([0.0; 3], |acc, k| math::add(acc, math::scale(mesh.vertices[f[k]], bary[k])));
        texture.sample_into(world, &mut tex);
        let normal_sum = if normals_ok {
            (0..3).fold([0.0; 3], |acc, k| math::add(acc, math::scale(mesh.normals[f[k]], bary[k])))
        } else {
            let (a, b, c) = (mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]);
            math::cross(math::sub(b, a), math::sub(c, a))
        };
        let n_cam = math::mat_t_vec(&cam.rotation, math::normalize(normal_sum));
        let (x, y) = (i % w, i / w);
        rgb.set(x, y, tex.map(|v| v.clamp(0.0, 1.0)));
        normal_map.set(x, y, n_cam.map(|v| (v * 0.5 + 0.5).clamp(0.0, 1.0)));
        coverage[i] = true;
        pixel_hits[i] = Some(PixelHit {
            face,
            bary,
            world,
            normal_sum,
            raw_rgb: tex,
        });
    }

    RasterOutput {
        rgb,
        normal_map,
        depth,
        coverage,
        hits: pixel_hits,
        camera: cam.clone(),
        mesh_key: mesh_key(mesh),
    }
}

/// Reverse-mode derivative of [`rasterize`] for upstream gradients on the
/// rgb image and/or the normal map (either may be `None`).
pub fn rasterize_backward(
    state: &RasterOutput,
    mesh: &SurfaceMesh,
    texture: &Grid3,
    upstream_rgb: Option<&[f64]>,
    upstream_normal: Option<&[f64]>,
) -> Result<RasterGradients, RasterError> {
    if state.mesh_key != mesh_key(mesh) {
        return Err(RasterError::StaleState);
    }
    let n = state.hits.len() * 3;
    for up in [upstream_rgb, upstream_normal].into_iter().flatten() {
        if up.len() != n {
            return Err(RasterError::UpstreamSize {
                expected: n,
                actual: up.len(),
            });
        }
    }
    if upstream_normal.is_some() && mesh.normals.len() != mesh.vertices.len() {
        return Err(RasterError::MissingNormals);
    }
    let mut grads = RasterGradients {
        texture: vec![0.0; texture.values().len()],
        positions: vec![[0.0; 3]; mesh.vertices.len()],
        normals: vec![[0.0; 3]; mesh.vertices.len()],
    };
    let rot = &state.camera.rotation;
    let mut jac = [[0.0; 3]; 3];
    for (i, hit) in state.hits.iter().enumerate() {
        let Some(hit) = hit else { continue };
        let f = mesh.faces[hit.face];
        if let Some(up) = upstream_rgb {
            let mut g = [up[3 * i], up[3 * i + 1], up[3 * i + 2]];
            for c in 0..3 {
                if !(0.0..=1.0).contains(&hit.raw_rgb[c]) {
                    g[c] = 0.0;
                }
            }
            if g.iter().any(|v| *v != 0.0) {
                if let Some(st) = texture.stencil(hit.world) {
                    texture.accumulate_backward(&st, &g, &mut grads.texture);
                }
                texture.spatial_jacobian(hit.world, &mut jac);
                let g_world = [
                    jac[0][0] * g[0] + jac[1][0] * g[1] + jac[2][0] * g[2],
                    jac[0][1] * g[0] + jac[1][1] * g[1] + jac[2][1] * g[2],
                    jac[0][2] * g[0] + jac[1][2] * g[1] + jac[2][2] * g[2],
                ];
                for k in 0..3 {
                    grads.positions[f[k]] = math::add(grads.positions[f[k]], math::scale(g_world, hit.bary[k]));
                }
            }
        }
        if let Some(up) = upstream_normal {
            // normal_map = 0.5 * Rᵀ normalize(u) + 0.5
            let g_map = [up[3 * i], up[3 * i + 1], up[3 * i + 2]];
            if g_map.iter().all(|v| *v == 0.0) {
                continue;
            }
            let g_world = math::mat_vec(rot, math::scale(g_map, 0.5));
            let len = math::norm(hit.normal_sum);
            if len == 0.0 {
                continue;
            }
            let nrm = math::scale(hit.normal_sum, 1.0 / len);
            let g_u = math::scale(math::sub(g_world, math::scale(nrm, math::dot(nrm, g_world))), 1.0 / len);
            for k in 0..3 {
                grads.normals[f[k]] = math::add(grads.normals[f[k]], math::scale(g_u, hit.bary[k]));
            }
        }
    }
    Ok(grads)
}

/// Intersection-over-union of two coverage masks.
pub fn coverage_iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
