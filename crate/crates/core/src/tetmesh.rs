//! Deformable tetrahedral grids and marching-tetrahedra surface extraction.
//!
//! Each grid vertex carries a signed distance `s` (negative inside) and a
//! deformation `Δv` added to its canonical position. The extracted
//! [`SurfaceMesh`] records, for every vertex, the grid edge it lies on and
//! its interpolation weight, so gradients on mesh vertices can be pulled back
//! to `S` and `ΔV` by [`marching_tets_backward`].

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::math::{self, Vec3};

/// Deformations are clamped to this fraction of the canonical spacing.
pub const MAX_DEFORM_FRACTION: f64 = 0.45;
/// Faces with smaller area are dropped after extraction.
pub const MIN_FACE_AREA: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TetError {
    #[error("tet grid resolution must lie in [8, 128], got {0}")]
    Resolution(usize),
    #[error("expected {expected} values, got {actual}")]
    Length { expected: usize, actual: usize },
    #[error("mesh provenance is stale: it was extracted from a different grid state")]
    StaleProvenance,
    #[error("upstream gradient has {actual} entries, mesh has {expected} vertices")]
    UpstreamSize { expected: usize, actual: usize },
    #[error("vertex {0} is not referenced by any face")]
    IsolatedVertex(usize),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Deformable tetrahedral grid over `[-1, 1]³`.
#[derive(Debug, Clone, PartialEq)]
pub struct TetGrid {
    resolution: usize,
    vertices: Vec<Vec3>,
    tets: Vec<[usize; 4]>,
    /// Signed distance per vertex, negative inside.
    pub sdf: Vec<f64>,
    /// Deformation per vertex.
    pub deform: Vec<Vec3>,
}

/// Where a mesh vertex came from: `pos = (1 - lambda) * p_a + lambda * p_b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Provenance {
    pub a: usize,
    pub b: usize,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    pub provenance: Vec<Provenance>,
    pub normals: Vec<Vec3>,
    /// Fingerprint of the grid state this mesh was extracted from.
    pub source: u64,
}

/// Gradients with respect to the grid parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TetGradients {
    pub sdf: Vec<f64>,
    pub deform: Vec<Vec3>,
}

/// Six-tet (Kuhn) split of the unit cube along the 0-7 diagonal. Corner `c`
/// has offsets `(c & 1, (c >> 1) & 1, (c >> 2) & 1)`.
const KUHN_PATHS: [[usize; 4]; 6] = [
    [0, 1, 3, 7],
    [0, 1, 5, 7],
    [0, 2, 3, 7],
    [0, 2, 6, 7],
    [0, 4, 5, 7],
    [0, 4, 6, 7],
];

impl TetGrid {
    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn tets(&self) -> &[[usize; 4]] {
        &self.tets
    }

    pub fn spacing(&self) -> f64 {
        2.0 / self.resolution as f64
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn position(&self, i: usize) -> Vec3 {
        math::add(self.vertices[i], self.deform[i])
    }

    /// Single-tet grid used for small exact cases. Not produced by
    /// [`build_tet_grid`]; resolution is reported as 0.
    pub fn from_parts(vertices: Vec<Vec3>, tets: Vec<[usize; 4]>) -> Self {
        let n = vertices.len();
        Self {
            resolution: 0,
            vertices,
            tets,
            sdf: vec![1.0; n],
            deform: vec![[0.0; 3]; n],
        }
    }

    /// Sets `S` from a function of canonical vertex position.
    pub fn set_sdf_fn(&mut self, f: impl Fn(Vec3) -> f64) {
        self.sdf = self.vertices.iter().map(|v| f(*v)).collect();
    }

    pub fn set_sdf(&mut self, sdf: Vec<f64>) -> Result<(), TetError> {
        if sdf.len() != self.vertices.len() {
            return Err(TetError::Length {
                expected: self.vertices.len(),
                actual: sdf.len(),
            });
        }
        self.sdf = sdf;
        Ok(())
    }

    /// Projects every deformation back into the allowed box.
    pub fn clamp_deform(&mut self) {
        let limit = self.max_deform();
        for d in &mut self.deform {
            for v in d.iter_mut() {
                *v = v.clamp(-limit, limit);
            }
        }
    }

    pub fn max_deform(&self) -> f64 {
        MAX_DEFORM_FRACTION * self.spacing()
    }

    /// Hash of resolution, `S` and `ΔV` bit patterns.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.resolution.hash(&mut h);
        self.vertices.len().hash(&mut h);
        self.tets.len().hash(&mut h);
        for s in &self.sdf {
            s.to_bits().hash(&mut h);
        }
        for d in &self.deform {
            for v in d {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Union-find roots of the connected regions of vertices satisfying
    /// `pred`, joined along tet edges.
    fn regions(&self, pred: impl Fn(f64) -> bool) -> Vec<Option<usize>> {
        let n = self.vertices.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        for t in &self.tets {
            for a in 0..4 {
                for b in a + 1..4 {
                    let (u, v) = (t[a], t[b]);
                    if pred(self.sdf[u]) && pred(self.sdf[v]) {
                        let (ru, rv) = (find(&mut parent, u), find(&mut parent, v));
                        if ru != rv {
                            parent[ru.max(rv)] = ru.min(rv);
                        }
                    }
                }
            }
        }
        (0..n).map(|i| pred(self.sdf[i]).then(|| find(&mut parent, i))).collect()
    }

    /// Flips every inside vertex (`S < 0`) that is not connected through tet
    /// edges to the largest inside region, by negating its `S`. Returns the
    /// number of vertices flipped.
    pub fn keep_largest_inside_component(&mut self) -> usize {
        let roots = self.regions(|s| s < 0.0);
        let mut sizes = vec![0usize; roots.len()];
        for r in roots.iter().flatten() {
            sizes[*r] += 1;
        }
        // ties resolve to the lowest root index
        let Some(keep) = (0..sizes.len()).filter(|&i| sizes[i] > 0).max_by_key(|&i| (sizes[i], std::cmp::Reverse(i))) else {
            return 0;
        };
        self.flip_where(|i| roots[i].is_some_and(|r| r != keep))
    }

    /// Flips every outside vertex that cannot reach the boundary of the grid
    /// through outside vertices, closing internal cavities. Returns the number
    /// of vertices flipped.
    pub fn fill_cavities(&mut self) -> usize {
        let roots = self.regions(|s| s >= 0.0);
        let on_boundary = |v: Vec3| v.iter().any(|c| c.abs() >= 1.0 - 1e-12);
        let open: std::collections::HashSet<usize> = roots
            .iter()
            .zip(&self.vertices)
            .filter_map(|(r, v)| r.filter(|_| on_boundary(*v)))
            .collect();
        self.flip_where(|i| roots[i].is_some_and(|r| !open.contains(&r)))
    }

    fn flip_where(&mut self, pred: impl Fn(usize) -> bool) -> usize {
        let mut flipped = 0;
        for i in 0..self.sdf.len() {
            if pred(i) {
                // an exact zero is outside, so it needs an explicit sign
                self.sdf[i] = if self.sdf[i] == 0.0 { -f64::MIN_POSITIVE } else { -self.sdf[i] };
                flipped += 1;
            }
        }
        flipped
    }

    pub fn tet_volume(&self, t: usize) -> f64 {
        let [a, b, c, d] = self.tets[t];
        let p = |i| self.position(i);
        let (e1, e2, e3) = (math::sub(p(b), p(a)), math::sub(p(c), p(a)), math::sub(p(d), p(a)));
        math::dot(e1, math::cross(e2, e3)) / 6.0
    }
}

/// Splits `[-1, 1]³` into `resolution³` cubes of six positively oriented
/// tetrahedra each. `S` starts at `+1` (empty) and `ΔV` at zero.
pub fn build_tet_grid(resolution: usize) -> Result<TetGrid, TetError> {
    if !(8..=128).contains(&resolution) {
        return Err(TetError::Resolution(resolution));
    }
    let n = resolution + 1;
    let h = 2.0 / resolution as f64;
    let index = |i: usize, j: usize, k: usize| (k * n + j) * n + i;
    let mut vertices = Vec::with_capacity(n * n * n);
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                vertices.push([-1.0 + i as f64 * h, -1.0 + j as f64 * h, -1.0 + k as f64 * h]);
            }
        }
    }
    let mut tets = Vec::with_capacity(6 * resolution.pow(3));
    for k in 0..resolution {
        for j in 0..resolution {
            for i in 0..resolution {
                let corner = |c: usize| index(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1));
                for path in KUHN_PATHS {
                    let mut t = path.map(corner);
                    let (a, b, c, d) = (vertices[t[0]], vertices[t[1]], vertices[t[2]], vertices[t[3]]);
                    let vol = math::dot(math::sub(b, a), math::cross(math::sub(c, a), math::sub(d, a)));
                    if vol < 0.0 {
                        t.swap(2, 3);
                    }
                    tets.push(t);
                }
            }
        }
    }
    let nv = vertices.len();
    Ok(TetGrid {
        resolution,
        vertices,
        tets,
        sdf: vec![1.0; nv],
        deform: vec![[0.0; 3]; nv],
    })
}

#[inline]
fn is_inside(s: f64) -> bool {
    s < 0.0
}

/// Marching tetrahedra over the current `S` and effective positions.
///
/// Crossing vertices are shared between tets (keyed by sorted grid edge) and
/// numbered in edge order, so the result does not depend on tet order.
/// Triangles are wound so that their normals point from the negative to the
/// positive side.
pub fn marching_tets(grid: &TetGrid) -> SurfaceMesh {
    let mut zero_tets = 0usize;
    // pass 1: crossing edges and per-tet polygons (as edge keys)
    let mut polygons: Vec<(Vec<(usize, usize)>, Vec3)> = Vec::new();
    for tet in &grid.tets {
        let s = tet.map(|v| grid.sdf[v]);
        if s.iter().all(|v| *v == 0.0) {
            zero_tets += 1;
        }
        let inside: Vec<usize> = (0..4).filter(|&i| is_inside(s[i])).collect();
        let outside: Vec<usize> = (0..4).filter(|&i| !is_inside(s[i])).collect();
        let key = |a: usize, b: usize| {
            let (va, vb) = (tet[a], tet[b]);
            if va < vb {
                (va, vb)
            } else {
                (vb, va)
            }
        };
        let edges = match inside.len() {
            1 => outside.iter().map(|&o| key(inside[0], o)).collect::<Vec<_>>(),
            3 => inside.iter().map(|&i| key(i, outside[0])).collect(),
            2 => {
                let (i0, i1, o0, o1) = (inside[0], inside[1], outside[0], outside[1]);
                vec![key(i0, o0), key(i0, o1), key(i1, o1), key(i1, o0)]
            }
            _ => continue,
        };
        let centroid = |set: &[usize]| {
            let mut c = [0.0; 3];
            for &i in set {
                c = math::add(c, grid.position(tet[i]));
            }
            math::scale(c, 1.0 / set.len() as f64)
        };
        let outward = math::sub(centroid(&outside), centroid(&inside));
        polygons.push((edges, outward));
    }
    if zero_tets > 0 {
        log::warn!("{zero_tets} tets have all-zero SDF; zero is treated as outside");
    }

    let mut edge_ids: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (edges, _) in &polygons {
        for e in edges {
            edge_ids.insert(*e, 0);
        }
    }
    let mut vertices = Vec::with_capacity(edge_ids.len());
    let mut provenance = Vec::with_capacity(edge_ids.len());
    for (id, (&(a, b), slot)) in edge_ids.iter_mut().enumerate() {
        *slot = id;
        let (sa, sb) = (grid.sdf[a], grid.sdf[b]);
        let lambda = sa / (sa - sb);
        vertices.push(math::lerp(grid.position(a), grid.position(b), lambda));
        provenance.push(Provenance { a, b, lambda });
    }

    let mut faces = Vec::new();
    for (edges, outward) in &polygons {
        let ids: Vec<usize> = edges.iter().map(|e| edge_ids[e]).collect();
        let tris: &[[usize; 3]] = if ids.len() == 3 { &[[0, 1, 2]] } else { &[[0, 1, 2], [0, 2, 3]] };
        for t in tris {
            let mut f = [ids[t[0]], ids[t[1]], ids[t[2]]];
            let n = face_cross(&vertices, f);
            if math::dot(n, *outward) < 0.0 {
                f.swap(1, 2);
            }
            faces.push(f);
        }
    }

    faces.retain(|f| 0.5 * math::norm(face_cross(&vertices, *f)) > MIN_FACE_AREA);

    // drop vertices no longer referenced after degenerate-face removal
    let mut used = vec![false; vertices.len()];
    for f in &faces {
        for &v in f {
            used[v] = true;
        }
    }
    let mut remap = vec![usize::MAX; vertices.len()];
    let mut kept_vertices = Vec::with_capacity(vertices.len());
    let mut kept_prov = Vec::with_capacity(vertices.len());
    for (i, u) in used.iter().enumerate() {
        if *u {
            remap[i] = kept_vertices.len();
            kept_vertices.push(vertices[i]);
            kept_prov.push(provenance[i]);
        }
    }
    for f in &mut faces {
        *f = f.map(|v| remap[v]);
    }

    let mut mesh = SurfaceMesh {
        vertices: kept_vertices,
        faces,
        provenance: kept_prov,
        normals: Vec::new(),
        source: grid.fingerprint(),
    };
    mesh.normals = vertex_normals(&mesh).unwrap_or_default();
    mesh
}

fn face_cross(vertices: &[Vec3], f: [usize; 3]) -> Vec3 {
    let (a, b, c) = (vertices[f[0]], vertices[f[1]], vertices[f[2]]);
    math::cross(math::sub(b, a), math::sub(c, a))
}

/// Pulls per-vertex position gradients back to `S` and `ΔV`, holding the
/// sign pattern (topology) fixed.
pub fn marching_tets_backward(grid: &TetGrid, mesh: &SurfaceMesh, upstream: &[Vec3]) -> Result<TetGradients, TetError> {
    if mesh.source != grid.fingerprint() {
        return Err(TetError::StaleProvenance);
    }
    if upstream.len() != mesh.vertices.len() {
        return Err(TetError::UpstreamSize {
            expected: mesh.vertices.len(),
            actual: upstream.len(),
        });
    }
    let mut grads = TetGradients {
        sdf: vec![0.0; grid.vertex_count()],
        deform: vec![[0.0; 3]; grid.vertex_count()],
    };
    for (prov, g) in mesh.provenance.iter().zip(upstream) {
        let Provenance { a, b, lambda } = *prov;
        let (sa, sb) = (grid.sdf[a], grid.sdf[b]);
        let denom = (sa - sb) * (sa - sb);
        let dl_dsa = -sb / denom;
        let dl_dsb = sa / denom;
        let edge = math::sub(grid.position(b), grid.position(a));
        let g_lambda = math::dot(*g, edge);
        grads.sdf[a] += g_lambda * dl_dsa;
        grads.sdf[b] += g_lambda * dl_dsb;
        grads.deform[a] = math::add(grads.deform[a], math::scale(*g, 1.0 - lambda));
        grads.deform[b] = math::add(grads.deform[b], math::scale(*g, lambda));
    }
    Ok(grads)
}

/// Area-weighted vertex normals, normalized.
pub fn vertex_normals(mesh: &SurfaceMesh) -> Result<Vec<Vec3>, TetError> {
    let sums = normal_sums(mesh);
    let mut seen = vec![false; mesh.vertices.len()];
    for f in &mesh.faces {
        for &v in f {
            seen[v] = true;
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(TetError::IsolatedVertex(i));
    }
    Ok(sums.into_iter().map(math::normalize).collect())
}

fn normal_sums(mesh: &SurfaceMesh) -> Vec<Vec3> {
    let mut sums = vec![[0.0; 3]; mesh.vertices.len()];
    for f in &mesh.faces {
        let n = face_cross(&mesh.vertices, *f);
        for &v in f {
            sums[v] = math::add(sums[v], n);
        }
    }
    sums
}

/// Reverse-mode derivative of [`vertex_normals`] with respect to vertex
/// positions, given dL/dnormal per vertex.
pub fn vertex_normals_backward(mesh: &SurfaceMesh, upstream: &[Vec3]) -> Vec<Vec3> {
    let sums = normal_sums(mesh);
    // through normalization: dn/du = (I - n nᵀ) / |u|
    let g_sum: Vec<Vec3> = sums
        .iter()
        .zip(upstream)
        .map(|(u, g)| {
            let len = math::norm(*u);
            if len == 0.0 {
                return [0.0; 3];
            }
            let n = math::scale(*u, 1.0 / len);
            math::scale(math::sub(*g, math::scale(n, math::dot(n, *g))), 1.0 / len)
        })
        .collect();
    let mut grads = vec![[0.0; 3]; mesh.vertices.len()];
    for f in &mesh.faces {
        let g = f.iter().fold([0.0; 3], |acc, &v| math::add(acc, g_sum[v]));
        let (p0, p1, p2) = (mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]);
        let (e1, e2) = (math::sub(p1, p0), math::sub(p2, p0));
        // n = e1 × e2
        let g_e1 = math::cross(e2, g);
        let g_e2 = math::cross(g, e1);
        grads[f[1]] = math::add(grads[f[1]], g_e1);
        grads[f[2]] = math::add(grads[f[2]], g_e2);
        grads[f[0]] = math::sub(grads[f[0]], math::add(g_e1, g_e2));
    }
    grads
}

impl SurfaceMesh {
    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    /// Edge → number of incident faces.
    pub fn edge_face_counts(&self) -> HashMap<(usize, usize), usize> {
        let mut counts = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        counts
    }

    pub fn is_watertight(&self) -> bool {
        self.edge_face_counts().values().all(|&c| c == 2)
    }

    /// Mesh built directly from triangles, without grid provenance.
    pub fn from_triangles(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self, TetError> {
        let n = vertices.len();
        let mut mesh = SurfaceMesh {
            vertices,
            faces,
            provenance: vec![
                Provenance {
                    a: 0,
                    b: 0,
                    lambda: 0.0
                };
                n
            ],
            normals: Vec::new(),
            source: 0,
        };
        mesh.normals = vertex_normals(&mesh)?;
        Ok(mesh)
    }
}

/// Writes `path` as OBJ and, when `colors` is given, a sibling ASCII PLY
/// (same stem, `.ply`).
pub fn export_mesh(mesh: &SurfaceMesh, colors: Option<&[[f64; 3]]>, path: &Path) -> Result<(), TetError> {
    if mesh.is_empty() {
        log::warn!("exporting empty mesh to {}", path.display());
    }
    write_file(path, &obj_string(mesh))?;
    if let Some(colors) = colors {
        write_file(&path.with_extension("ply"), &ply_string(mesh, colors))?;
    }
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> Result<(), TetError> {
    let io_err = |e| TetError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut f = std::fs::File::create(path).map_err(io_err)?;
    f.write_all(contents.as_bytes()).map_err(io_err)
}

pub fn obj_string(mesh: &SurfaceMesh) -> String {
    let mut s = String::new();
    for v in &mesh.vertices {
        let _ = writeln!(s, "v {:.6} {:.6} {:.6}", v[0], v[1], v[2]);
    }
    let normals = if mesh.normals.len() == mesh.vertices.len() {
        mesh.normals.clone()
    } else {
        vertex_normals(mesh).unwrap_or_else(|_| vec![[0.0, 0.0, 1.0]; mesh.vertices.len()])
    };
    for n in &normals {
        let _ = writeln!(s, "vn {:.6} {:.6} {:.6}", n[0], n[1], n[2]);
    }
    for f in &mesh.faces {
        let (a, b, c) = (f[0] + 1, f[1] + 1, f[2] + 1);
        let _ = writeln!(s, "f {a}//{a} {b}//{b} {c}//{c}");
    }
    s
}

pub fn ply_string(mesh: &SurfaceMesh, colors: &[[f64; 3]]) -> String {
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", mesh.vertices.len());
    s.push_str("property float x\nproperty float y\nproperty float z\n");
    s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    let _ = writeln!(s, "element face {}", mesh.faces.len());
    s.push_str("property list uchar int vertex_indices\nend_header\n");
    let byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    for (v, c) in mesh.vertices.iter().zip(colors.iter().chain(std::iter::repeat(&[1.0; 3]))) {
        let _ = writeln!(s, "{:.6} {:.6} {:.6} {} {} {}", v[0], v[1], v[2], byte(c[0]), byte(c[1]), byte(c[2]));
    }
    for f in &mesh.faces {
        let _ = writeln!(s, "3 {} {} {}", f[0], f[1], f[2]);
    }
    s
}

/// Parses the `v` and `f` records of an OBJ file (as written by
/// [`obj_string`]).
pub fn parse_obj(text: &str) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for line in text.lines() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let c: Vec<f64> = parts.filter_map(|p| p.parse().ok()).collect();
                if c.len() >= 3 {
                    vertices.push([c[0], c[1], c[2]]);
                }
            }
            Some("f") => {
                let idx: Vec<usize> = parts
                    .filter_map(|p| p.split('/').next().and_then(|i| i.parse::<usize>().ok()))
                    .collect();
                if idx.len() == 3 {
                    faces.push([idx[0] - 1, idx[1] - 1, idx[2] - 1]);
                }
            }
            _ => {}
        }
    }
    (vertices, faces)
}

/// Loads an OBJ into a mesh without grid provenance.
pub fn load_obj(path: &Path) -> Result<SurfaceMesh, TetError> {
    let text = std::fs::read_to_string(path).map_err(|e| TetError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let (vertices, faces) = parse_obj(&text);
    SurfaceMesh::from_triangles(vertices, faces)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_tet() -> TetGrid {
        TetGrid::from_parts(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            vec![[0, 1, 2, 3]],
        )
    }

    #[test]
    fn grid_counts_and_orientation() {
        let g = build_tet_grid(8).unwrap();
        assert_eq!(g.vertex_count(), 729);
        assert_eq!(g.tets().len(), 3072);
        let total: f64 = (0..g.tets().len()).map(|t| g.tet_volume(t)).sum();
        assert!((0..g.tets().len()).all(|t| g.tet_volume(t) > 0.0));
        assert!((total - 8.0).abs() < 1e-9);
        assert!(matches!(build_tet_grid(7), Err(TetError::Resolution(7))));
        assert!(matches!(build_tet_grid(129), Err(TetError::Resolution(129))));
    }

    #[test]
    fn largest_component_drops_separate_blob() {
        let mut g = build_tet_grid(16).unwrap();
        let ball = |p: Vec3, c: Vec3, r: f64| math::norm(math::sub(p, c)) - r;
        g.set_sdf_fn(|p| ball(p, [-0.3, 0.0, 0.0], 0.45).min(ball(p, [0.75, 0.75, 0.75], 0.2)));
        let before = g.sdf.iter().filter(|s| **s < 0.0).count();
        let flipped = g.keep_largest_inside_component();
        assert!(flipped > 0 && flipped < before / 2);
        for (v, s) in g.vertices().iter().zip(&g.sdf) {
            assert_eq!(*s < 0.0, ball(*v, [-0.3, 0.0, 0.0], 0.45) < 0.0);
        }
        assert_eq!(g.keep_largest_inside_component(), 0);
    }

    #[test]
    fn cavity_is_filled_and_shell_surface_remains() {
        let mut g = build_tet_grid(16).unwrap();
        g.set_sdf_fn(|p| {
            let r = math::norm(p);
            (r - 0.7).max(0.3 - r)
        });
        let outer_only = {
            let mut h = g.clone();
            h.set_sdf_fn(|p| math::norm(p) - 0.7);
            h
        };
        assert!(g.fill_cavities() > 0);
        for (a, b) in g.sdf.iter().zip(&outer_only.sdf) {
            assert_eq!(*a < 0.0, *b < 0.0);
        }
        assert_eq!(g.fill_cavities(), 0);
    }

    #[test]
    fn all_positive_is_empty() {
        let g = build_tet_grid(8).unwrap();
        assert!(marching_tets(&g).is_empty());
    }

    #[test]
    fn single_tet_single_triangle_at_midpoints() {
        let mut g = unit_tet();
        g.sdf = vec![-1.0, 1.0, 1.0, 1.0];
        let m = marching_tets(&g);
        assert_eq!(m.faces.len(), 1);
        assert_eq!(m.vertices.len(), 3);
        for p in &m.provenance {
            assert_eq!(p.a, 0);
            assert_eq!(p.lambda, 0.5);
        }
        let mut vs = m.vertices.clone();
        vs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(vs, vec![[0.0, 0.0, 0.5], [0.0, 0.5, 0.0], [0.5, 0.0, 0.0]]);
        // outward: away from vertex 0
        let n = m.normals[0];
        assert!(math::dot(n, [1.0, 1.0, 1.0]) > 0.0);
    }

    #[test]
    fn two_inside_gives_quad() {
        let mut g = unit_tet();
        g.sdf = vec![-1.0, -0.5, 1.0, 2.0];
        let m = marching_tets(&g);
        assert_eq!(m.faces.len(), 2);
        assert_eq!(m.vertices.len(), 4);
    }

    #[test]
    fn zero_sdf_counts_as_outside() {
        let mut g = unit_tet();
        g.sdf = vec![0.0; 4];
        assert!(marching_tets(&g).is_empty());
    }

    #[test]
    fn lambda_derivative_matches_finite_difference() {
        // symmetric edge: s_a = -s_b, derivative 1/(4 s_a) for both ends
        let mut g = unit_tet();
        g.sdf = vec![-0.8, 0.8, 0.8, 0.8];
        let m = marching_tets(&g);
        let lambda = |sa: f64, sb: f64| sa / (sa - sb);
        let h = 1e-6;
        let fd_a = (lambda(-0.8 + h, 0.8) - lambda(-0.8 - h, 0.8)) / (2.0 * h);
        let fd_b = (lambda(-0.8, 0.8 + h) - lambda(-0.8, 0.8 - h)) / (2.0 * h);
        assert!((fd_a - 1.0 / (4.0 * -0.8)).abs() < 1e-8);
        assert!((fd_b - 1.0 / (4.0 * -0.8)).abs() < 1e-8);
        // vertex on edge (0,1) moves along +x as lambda grows
        let k = m.provenance.iter().position(|p| p.b == 1).unwrap();
        let mut up = vec![[0.0; 3]; m.vertices.len()];
        up[k] = [1.0, 0.0, 0.0];
        let grads = marching_tets_backward(&g, &m, &up).unwrap();
        assert!((grads.sdf[0] - fd_a).abs() < 1e-8);
        assert!((grads.sdf[1] - fd_b).abs() < 1e-8);
    }

    #[test]
    fn zero_upstream_zero_gradients_and_stale_rejected() {
        let mut g = build_tet_grid(8).unwrap();
        g.set_sdf_fn(|p| math::norm(p) - 0.5);
        let m = marching_tets(&g);
        let grads = marching_tets_backward(&g, &m, &vec![[0.0; 3]; m.vertices.len()]).unwrap();
        assert!(grads.sdf.iter().all(|v| *v == 0.0));
        g.sdf[0] += 0.1;
        assert!(matches!(
            marching_tets_backward(&g, &m, &vec![[0.0; 3]; m.vertices.len()]),
            Err(TetError::StaleProvenance)
        ));
    }

    #[test]
    fn single_triangle_normals_and_winding() {
        let m = SurfaceMesh::from_triangles(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![[0, 1, 2]]).unwrap();
        for n in &m.normals {
            assert_eq!(*n, [0.0, 0.0, 1.0]);
        }
        let flipped = SurfaceMesh::from_triangles(m.vertices.clone(), vec![[0, 2, 1]]).unwrap();
        assert_eq!(flipped.normals[0], [0.0, 0.0, -1.0]);
        let isolated = SurfaceMesh {
            vertices: vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [5.0; 3]],
            faces: vec![[0, 1, 2]],
            provenance: vec![],
            normals: vec![],
            source: 0,
        };
        assert!(matches!(vertex_normals(&isolated), Err(TetError::IsolatedVertex(3))));
    }

    #[test]
    fn normals_backward_matches_finite_difference() {
        let mut g = build_tet_grid(8).unwrap();
        g.set_sdf_fn(|p| (p[0] / 0.7).powi(2) + (p[1] / 0.5).powi(2) + (p[2] / 0.6).powi(2) - 1.0);
        let mesh = marching_tets(&g);
        let weights: Vec<Vec3> = (0..mesh.vertices.len())
            .map(|i| [(i as f64 * 0.7).sin(), (i as f64 * 1.3).cos(), 0.5])
            .collect();
        let loss = |m: &SurfaceMesh| -> f64 {
            vertex_normals(m).unwrap().iter().zip(&weights).map(|(n, w)| math::dot(*n, *w)).sum()
        };
        let grads = vertex_normals_backward(&mesh, &weights);
        for v in [0, 5, 17, mesh.vertices.len() / 2] {
            for a in 0..3 {
                let h = 1e-6;
                let mut mp = mesh.clone();
                mp.vertices[v][a] += h;
                let mut mm = mesh.clone();
                mm.vertices[v][a] -= h;
                let fd = (loss(&mp) - loss(&mm)) / (2.0 * h);
                assert!((fd - grads[v][a]).abs() <= 1e-5 * fd.abs().max(1e-3), "{fd} vs {}", grads[v][a]);
            }
        }
    }

    #[test]
    fn obj_format_for_one_triangle() {
        let m = SurfaceMesh::from_triangles(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![[0, 1, 2]]).unwrap();
        let s = obj_string(&m);
        assert_eq!(s.lines().filter(|l| l.starts_with("v ")).count(), 3);
        assert_eq!(s.lines().filter(|l| l.starts_with("vn ")).count(), 3);
        assert_eq!(s.lines().filter(|l| l.starts_with("f ")).collect::<Vec<_>>(), vec!["f 1//1 2//2 3//3"]);
        let ply = ply_string(&m, &[[1.0, 0.0, 0.0]; 3]);
        assert!(ply.contains("element vertex 3") && ply.contains("1.000000 0.000000 0.000000 255 0 0"));
    }

    #[test]
    fn empty_mesh_exports_valid_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = marching_tets(&build_tet_grid(8).unwrap());
        let path = dir.path().join("empty.obj");
        export_mesh(&m, Some(&[]), &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "");
        assert!(std::fs::read_to_string(dir.path().join("empty.ply")).unwrap().contains("element face 0"));
        let err = export_mesh(&m, None, &dir.path().join("missing/x.obj")).unwrap_err();
        assert!(err.to_string().contains("missing/x.obj"));
    }
}
