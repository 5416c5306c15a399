//! Dense voxel fields over the cube `[-1, 1]³`.
//!
//! A [`Grid3`] stores `resolution³` nodes (both faces of the cube included),
//! each carrying one (density) or three (color) channels. Values are kept as
//! raw 32-bit reals; density activation and color clamping happen in the
//! renderers. Queries interpolate trilinearly and return zero outside the cube.

use std::io::{self, BufRead, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::math::Vec3;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("grid resolution must be at least 2, got {0}")]
    Resolution(usize),
    #[error("grid channels must be 1 or 3, got {0}")]
    Channels(usize),
    #[error("expected {expected} values, got {actual}")]
    Length { expected: usize, actual: usize },
    #[error("spatial gradient requires a scalar grid, this grid has {0} channels")]
    NotScalar(usize),
    #[error("malformed GRID3 header: {0}")]
    Header(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

/// Axis-aligned voxel field over `[-1, 1]³`.
///
/// Layout is node-major with interleaved channels: the value of channel `c`
/// at node `(i, j, k)` lives at `((k * res + j) * res + i) * channels + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid3 {
    resolution: usize,
    channels: usize,
    values: Vec<f32>,
}

/// A field query result.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSample {
    pub value: Vec<f64>,
    pub point: Vec3,
}

/// The eight nodes surrounding a query point and their trilinear weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    /// Node indices (not multiplied by the channel count).
    pub nodes: [usize; 8],
    pub weights: [f64; 8],
    /// Cell-local coordinates in `[0, 1]³`.
    pub frac: Vec3,
}

impl Grid3 {
    pub fn new(resolution: usize, channels: usize) -> Result<Self, FieldError> {
        Self::filled(resolution, channels, 0.0)
    }

    pub fn filled(resolution: usize, channels: usize, value: f32) -> Result<Self, FieldError> {
        validate_shape(resolution, channels)?;
        Ok(Self {
            resolution,
            channels,
            values: vec![value; resolution.pow(3) * channels],
        })
    }

    pub fn from_values(resolution: usize, channels: usize, values: Vec<f32>) -> Result<Self, FieldError> {
        validate_shape(resolution, channels)?;
        let expected = resolution.pow(3) * channels;
        if values.len() != expected {
            return Err(FieldError::Length {
                expected,
                actual: values.len(),
            });
        }
        Ok(Self {
            resolution,
            channels,
            values,
        })
    }

    /// Builds a grid by evaluating `f` at every node position.
    pub fn from_fn(resolution: usize, channels: usize, f: impl Fn(Vec3) -> Vec<f64>) -> Result<Self, FieldError> {
        let mut grid = Self::new(resolution, channels)?;
        for node in 0..grid.node_count() {
            let v = f(grid.node_position(node));
            for c in 0..channels {
                grid.values[node * channels + c] = v[c] as f32;
            }
        }
        Ok(grid)
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn node_count(&self) -> usize {
        self.resolution.pow(3)
    }

    /// Distance between neighbouring nodes.
    pub fn spacing(&self) -> f64 {
        2.0 / (self.resolution - 1) as f64
    }

    pub fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.resolution + j) * self.resolution + i
    }

    pub fn node_position(&self, node: usize) -> Vec3 {
        let r = self.resolution;
        let (i, j, k) = (node % r, (node / r) % r, node / (r * r));
        let h = self.spacing();
        [-1.0 + i as f64 * h, -1.0 + j as f64 * h, -1.0 + k as f64 * h]
    }

    pub fn node_value(&self, node: usize, channel: usize) -> f32 {
        self.values[node * self.channels + channel]
    }

    /// Trilinear stencil at `point`, or `None` outside the cube.
    pub fn stencil(&self, point: Vec3) -> Option<Stencil> {
        if point.iter().any(|&x| !(-1.0..=1.0).contains(&x)) {
            return None;
        }
        let cells = (self.resolution - 1) as f64;
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let u = (point[a] + 1.0) * 0.5 * cells;
            let i = (u.floor() as usize).min(self.resolution - 2);
            base[a] = i;
            frac[a] = u - i as f64;
        }
        let mut nodes = [0usize; 8];
        let mut weights = [0.0; 8];
        for corner in 0..8 {
            let (dx, dy, dz) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
            nodes[corner] = self.node_index(base[0] + dx, base[1] + dy, base[2] + dz);
            let wx = if dx == 1 { frac[0] } else { 1.0 - frac[0] };
            let wy = if dy == 1 { frac[1] } else { 1.0 - frac[1] };
            let wz = if dz == 1 { frac[2] } else { 1.0 - frac[2] };
            weights[corner] = wx * wy * wz;
        }
        Some(Stencil { nodes, weights, frac })
    }

    /// Interpolates all channels at `point` into `out`; zero outside the cube.
    pub fn sample_into(&self, point: Vec3, out: &mut [f64]) -> Option<Stencil> {
        out.iter_mut().for_each(|v| *v = 0.0);
        let stencil = self.stencil(point)?;
        for (node, w) in stencil.nodes.iter().zip(stencil.weights.iter()) {
            let base = node * self.channels;
            for (c, o) in out.iter_mut().enumerate().take(self.channels) {
                *o += w * self.values[base + c] as f64;
            }
        }
        Some(stencil)
    }

    pub fn sample_trilinear(&self, point: Vec3) -> FieldSample {
        let mut value = vec![0.0; self.channels];
        self.sample_into(point, &mut value);
        FieldSample { value, point }
    }

    /// Adjoint of [`Grid3::sample_trilinear`]: the (at most eight) node
    /// entries touched by `point`, each as `(value index, weight · upstream)`.
    pub fn sample_trilinear_backward(&self, point: Vec3, upstream: &[f64]) -> Vec<(usize, f64)> {
        let Some(stencil) = self.stencil(point) else {
            return Vec::new();
        };
        let mut out = Vec::with_capacity(8 * self.channels);
        for (node, w) in stencil.nodes.iter().zip(stencil.weights.iter()) {
            for (c, u) in upstream.iter().enumerate().take(self.channels) {
                out.push((node * self.channels + c, w * u));
            }
        }
        out
    }

    /// Scatters `weight · upstream` into a dense gradient buffer shaped like
    /// the grid values.
    pub fn accumulate_backward(&self, stencil: &Stencil, upstream: &[f64], grad: &mut [f64]) {
        for (node, w) in stencil.nodes.iter().zip(stencil.weights.iter()) {
            let base = node * self.channels;
            for c in 0..self.channels {
                grad[base + c] += w * upstream[c];
            }
        }
    }

    /// Analytic spatial derivative of the interpolant of a scalar grid.
    pub fn grid_gradient_field(&self, point: Vec3) -> Result<Vec3, FieldError> {
        if self.channels != 1 {
            return Err(FieldError::NotScalar(self.channels));
        }
        let mut out = [[0.0; 3]; 1];
        self.spatial_jacobian(point, &mut out);
        Ok(out[0])
    }

    /// Per-channel spatial gradient of the interpolant. Rows are channels.
    /// Zero outside the cube.
    pub fn spatial_jacobian(&self, point: Vec3, out: &mut [Vec3]) {
        out.iter_mut().for_each(|r| *r = [0.0; 3]);
        let Some(st) = self.stencil(point) else {
            return;
        };
        let scale = 0.5 * (self.resolution - 1) as f64;
        let f = st.frac;
        let lin = |t: f64, hi: bool| if hi { t } else { 1.0 - t };
        // derivative along `axis` = sum over the 4 edges parallel to it of
        // (weight of the edge) * (value difference along the edge)
        for axis in 0..3 {
            let bit = 1 << axis;
            let (a1, a2) = ((axis + 1) % 3, (axis + 2) % 3);
            for corner in (0..8usize).filter(|c| c & bit == 0) {
                let w = lin(f[a1], corner & (1 << a1) != 0) * lin(f[a2], corner & (1 << a2) != 0) * scale;
                let (lo, hi) = (st.nodes[corner] * self.channels, st.nodes[corner | bit] * self.channels);
                for (c, row) in out.iter_mut().enumerate().take(self.channels) {
                    row[axis] += w * (self.values[hi + c] as f64 - self.values[lo + c] as f64);
                }
            }
        }
    }

    /// Writes the `GRID3 <res> <channels>` header followed by little-endian
    /// `f32` values.
    pub fn write_to(&self, mut w: impl Write) -> io::Result<()> {
        writeln!(w, "GRID3 {} {}", self.resolution, self.channels)?;
        let mut bytes = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)
    }

    pub fn read_from(r: impl Read) -> Result<Self, FieldError> {
        let mut reader = io::BufReader::new(r);
        let mut header = String::new();
        reader.read_line(&mut header).map_err(|e| FieldError::Io {
            path: "<stream>".into(),
            source: e,
        })?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != "GRID3" {
            return Err(FieldError::Header(header.trim_end().to_string()));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| FieldError::Header(header.trim_end().to_string()));
        let (res, ch) = (parse(parts[1])?, parse(parts[2])?);
        validate_shape(res, ch)?;
        let mut bytes = Vec::new();
        reader.read_to_end(&mut bytes).map_err(|e| FieldError::Io {
            path: "<stream>".into(),
            source: e,
        })?;
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if bytes.len() % 4 != 0 {
            return Err(FieldError::Header("trailing bytes after values".into()));
        }
        Self::from_values(res, ch, values)
    }

    pub fn save(&self, path: &Path) -> Result<(), FieldError> {
        let io_err = |e| FieldError::Io {
            path: path.display().to_string(),
            source: e,
        };
        let file = std::fs::File::create(path).map_err(io_err)?;
        let mut w = io::BufWriter::new(file);
        self.write_to(&mut w).map_err(io_err)?;
        w.flush().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self, FieldError> {
        let file = std::fs::File::open(path).map_err(|e| FieldError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::read_from(file).map_err(|e| match e {
            FieldError::Io { source, .. } => FieldError::Io {
                path: path.display().to_string(),
                source,
            },
            other => other,
        })
    }
}

fn validate_shape(resolution: usize, channels: usize) -> Result<(), FieldError> {
    if resolution < 2 {
        return Err(FieldError::Resolution(resolution));
    }
    if channels != 1 && channels != 3 {
        return Err(FieldError::Channels(channels));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(res: usize, channels: usize, seed: u64) -> Grid3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..res.pow(3) * channels).map(|_| rng.random_range(-1.0..1.0)).collect();
        Grid3::from_values(res, channels, values).unwrap()
    }

    #[test]
    fn constant_grid_interpolates_constant() {
        let g = Grid3::filled(5, 1, 0.7).unwrap();
        let s = g.sample_trilinear([0.13, -0.42, 0.9]);
        assert!((s.value[0] - 0.7f32 as f64).abs() < 1e-12);
    }

    #[test]
    fn node_query_returns_node_value() {
        let g = random_grid(5, 3, 1);
        let node = g.node_index(1, 3, 2);
        let s = g.sample_trilinear(g.node_position(node));
        for c in 0..3 {
            assert_eq!(s.value[c], g.node_value(node, c) as f64);
        }
    }

    #[test]
    fn reproduces_linear_function() {
        let g = Grid3::from_fn(9, 1, |p| vec![p[0]]).unwrap();
        let s = g.sample_trilinear([0.25, 0.1, -0.3]);
        assert!((s.value[0] - 0.25).abs() < 1e-7);
    }

    #[test]
    fn outside_bbox_is_zero() {
        let g = Grid3::filled(4, 3, 1.0).unwrap();
        assert_eq!(g.sample_trilinear([1.01, 0.0, 0.0]).value, vec![0.0; 3]);
        assert!(g.sample_trilinear_backward([0.0, -1.5, 0.0], &[1.0, 1.0, 1.0]).is_empty());
    }

    #[test]
    fn backward_at_node_is_single_weight() {
        let g = Grid3::new(5, 1).unwrap();
        let node = g.node_index(2, 2, 2);
        let grads: Vec<_> = g
            .sample_trilinear_backward(g.node_position(node), &[1.0])
            .into_iter()
            .filter(|(_, w)| *w != 0.0)
            .collect();
        assert_eq!(grads, vec![(node, 1.0)]);
    }

    #[test]
    fn backward_at_cell_center_is_uniform() {
        let g = Grid3::new(3, 1).unwrap();
        let grads = g.sample_trilinear_backward([-0.5, -0.5, -0.5], &[1.0]);
        assert_eq!(grads.len(), 8);
        for (_, w) in grads {
            assert!((w - 0.125).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_matches_finite_difference() {
        let g = random_grid(6, 3, 7);
        let p = [0.123, -0.456, 0.789];
        let upstream = [0.3, -1.2, 0.5];
        let grads = g.sample_trilinear_backward(p, &upstream);
        for (idx, analytic) in grads {
            let eps = 1e-3f32;
            let mut plus = g.clone();
            plus.values_mut()[idx] += eps;
            let mut minus = g.clone();
            minus.values_mut()[idx] -= eps;
            let h = (plus.values()[idx] as f64 - minus.values()[idx] as f64) / 2.0;
            let fp = plus.sample_trilinear(p).value;
            let fm = minus.sample_trilinear(p).value;
            let numeric: f64 = (0..3).map(|c| upstream[c] * (fp[c] - fm[c]) / (2.0 * h)).sum();
            let rel = (numeric - analytic).abs() / analytic.abs().max(1e-12);
            assert!(rel < 1e-5, "idx {idx}: {numeric} vs {analytic}");
        }
    }

    #[test]
    fn spatial_gradient_cases() {
        let c = Grid3::filled(5, 1, 0.3).unwrap();
        assert_eq!(c.grid_gradient_field([0.1, 0.2, 0.3]).unwrap(), [0.0, 0.0, 0.0]);
        let fx = Grid3::from_fn(7, 1, |p| vec![p[0]]).unwrap();
        let g = fx.grid_gradient_field([0.31, -0.2, 0.55]).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-6 && g[1].abs() < 1e-6 && g[2].abs() < 1e-6);
        assert!(matches!(
            Grid3::new(3, 3).unwrap().grid_gradient_field([0.0; 3]),
            Err(FieldError::NotScalar(3))
        ));
    }

    #[test]
    fn spatial_gradient_matches_finite_difference() {
        let g = random_grid(6, 1, 3);
        // cell interior points, away from the boundaries (spacing 0.4)
        for p in [[0.1, 0.1, 0.1], [-0.55, 0.27, 0.71], [0.63, -0.83, -0.09]] {
            let analytic = g.grid_gradient_field(p).unwrap();
            for a in 0..3 {
                let h = 1e-4;
                let mut pp = p;
                pp[a] += h;
                let mut pm = p;
                pm[a] -= h;
                let numeric = (g.sample_trilinear(pp).value[0] - g.sample_trilinear(pm).value[0]) / (2.0 * h);
                let rel = (numeric - analytic[a]).abs() / analytic[a].abs().max(1e-9);
                assert!(rel < 1e-3, "axis {a}: {numeric} vs {}", analytic[a]);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let g = random_grid(4, 3, 11);
        let mut buf = Vec::new();
        g.write_to(&mut buf).unwrap();
        assert!(buf.starts_with(b"GRID3 4 3\n"));
        assert_eq!(Grid3::read_from(buf.as_slice()).unwrap(), g);
        assert!(matches!(Grid3::read_from(&b"GRID2 4 3\n"[..]), Err(FieldError::Header(_))));
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(matches!(Grid3::new(1, 1), Err(FieldError::Resolution(1))));
        assert!(matches!(Grid3::new(4, 2), Err(FieldError::Channels(2))));
        assert!(matches!(
            Grid3::from_values(2, 1, vec![0.0; 7]),
            Err(FieldError::Length { expected: 8, actual: 7 })
        ));
    }

    proptest! {
        #[test]
        fn weights_are_a_partition_of_unity(x in -1.0f64..=1.0, y in -1.0f64..=1.0, z in -1.0f64..=1.0) {
            let g = Grid3::new(7, 1).unwrap();
            let st = g.stencil([x, y, z]).unwrap();
            prop_assert!(st.weights.iter().all(|w| *w >= 0.0));
            prop_assert!((st.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn backward_is_adjoint_of_forward(
            seed in 0u64..1000,
            x in -0.99f64..0.99, y in -0.99f64..0.99, z in -0.99f64..0.99,
            u in prop::array::uniform3(-1.0f64..1.0),
        ) {
            let g = random_grid(5, 3, seed);
            let d = random_grid(5, 3, seed + 1);
            let p = [x, y, z];
            let eps = 1e-4;
            let mut gd = g.clone();
            for (v, dv) in gd.values_mut().iter_mut().zip(d.values()) {
                *v = (*v as f64 + eps * *dv as f64) as f32;
            }
            // realized f32 perturbation direction
            let dir = |i: usize| (gd.values()[i] as f64 - g.values()[i] as f64) / eps;
            let lhs: f64 = g.sample_trilinear_backward(p, &u).into_iter().map(|(i, w)| w * dir(i)).sum();
            let (f1, f0) = (gd.sample_trilinear(p).value, g.sample_trilinear(p).value);
            let rhs: f64 = (0..3).map(|c| u[c] * (f1[c] - f0[c]) / eps).sum();
            prop_assert!((lhs - rhs).abs() <= 1e-3 * lhs.abs().max(1e-2));
        }

        #[test]
        fn continuous_across_cell_boundaries(seed in 0u64..1000, j in 1usize..4, y in -1.0f64..1.0, z in -1.0f64..1.0) {
            let g = random_grid(5, 1, seed);
            let x = -1.0 + j as f64 * g.spacing();
            let a = g.sample_trilinear([x - 1e-12, y, z]).value[0];
            let b = g.sample_trilinear([x + 1e-12, y, z]).value[0];
            prop_assert!((a - b).abs() < 1e-6);
        }
    }
}
