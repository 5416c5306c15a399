use distill3d::fields::Grid3;
use distill3d::math::{self, Vec3};
use distill3d::render_mesh::{coverage_iou, rasterize, rasterize_backward};
use distill3d::render_volume::{ray_weights, render, render_backward, CameraPose, VolumeSettings};
use distill3d::tetmesh::{build_tet_grid, marching_tets, marching_tets_backward, TetGrid};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relative error with an absolute floor, so coordinates whose true
/// derivative is ~0 are judged on absolute error instead.
fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn random_grid(rng: &mut ChaCha8Rng, res: usize, ch: usize, lo: f32, hi: f32) -> Grid3 {
    Grid3::from_values(res, ch, (0..res * res * res * ch).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Central difference of `loss` in one `f32` grid coordinate, divided by the
/// perturbation actually stored.
fn fd_f32(grid: &Grid3, idx: usize, h: f32, loss: impl Fn(&Grid3) -> f64) -> f64 {
    let (mut p, mut m) = (grid.clone(), grid.clone());
    p.values_mut()[idx] += h;
    m.values_mut()[idx] -= h;
    let realized = (p.values()[idx] - m.values()[idx]) as f64;
    (loss(&p) - loss(&m)) / realized
}

fn pass_fraction(errors: &[f64], tol: f64) -> f64 {
    errors.iter().filter(|e| **e < tol).count() as f64 / errors.len() as f64
}

#[test]
fn volume_render_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let density = random_grid(&mut rng, 8, 1, -1.0, 2.0);
    let color = random_grid(&mut rng, 8, 3, 0.1, 0.9);
    let cam = CameraPose::orbit(35.0, 20.0, 2.6, 45.0, 16, 16).unwrap();
    let settings = VolumeSettings {
        steps: 32,
        ..VolumeSettings::default()
    };
    let up: Vec<f64> = (0..16 * 16 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let g = render_backward(&density, &color, &cam, &settings, &up);
    let loss = |d: &Grid3, c: &Grid3| dot(&render(d, c, &cam, &settings).pixels, &up);

    let scale = g.density.iter().chain(&g.color).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-4 * scale;
    let mut errors = Vec::new();
    for idx in (0..density.values().len()).step_by(3) {
        let num = fd_f32(&density, idx, 1e-3, |d| loss(d, &color));
        errors.push(rel_err(g.density[idx], num, floor));
    }
    for idx in (0..color.values().len()).step_by(5) {
        let num = fd_f32(&color, idx, 1e-3, |c| loss(&density, c));
        errors.push(rel_err(g.color[idx], num, floor));
    }
    let frac = pass_fraction(&errors, 1e-3);
    assert!(frac >= 0.99, "{frac:.4} of {} coordinates within tolerance", errors.len());
}

fn sphere_mesh(res: usize, r: f64) -> (TetGrid, distill3d::tetmesh::SurfaceMesh) {
    let mut grid = build_tet_grid(res).unwrap();
    grid.set_sdf_fn(|p| math::norm(p) - r);
    let mesh = marching_tets(&grid);
    (grid, mesh)
}

#[test]
fn raster_texture_gradients_match_finite_differences() {
    let (_, mesh) = sphere_mesh(16, 0.6);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let tex = random_grid(&mut rng, 8, 3, 0.1, 0.9);
    let cam = CameraPose::orbit(-25.0, 15.0, 2.4, 45.0, 16, 16).unwrap();
    let up: Vec<f64> = (0..16 * 16 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let state = rasterize(&mesh, &tex, &cam, [1.0; 3]);
    let g = rasterize_backward(&state, &mesh, &tex, Some(&up), None).unwrap();
    let loss = |t: &Grid3| dot(&rasterize(&mesh, t, &cam, [1.0; 3]).rgb.pixels, &up);
    let scale = g.texture.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let errors: Vec<f64> = (0..tex.values().len())
        .map(|idx| rel_err(g.texture[idx], fd_f32(&tex, idx, 1e-3, loss), 1e-4 * scale))
        .collect();
    assert!(g.texture.iter().filter(|v| **v != 0.0).count() > 50);
    let frac = pass_fraction(&errors, 1e-3);
    assert!(frac >= 0.99, "{frac:.4} of {} coordinates within tolerance", errors.len());
}

#[test]
fn marching_tets_gradients_match_finite_differences() {
    let (grid, mesh) = sphere_mesh(8, 0.55);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let up: Vec<Vec3> = mesh
        .vertices
        .iter()
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect();
    let loss = |g: &TetGrid| -> f64 {
        let m = marching_tets(g);
        assert_eq!(m.faces, mesh.faces, "perturbation changed the topology");
        m.vertices.iter().zip(&up).map(|(v, u)| math::dot(*v, *u)).sum()
    };
    let grads = marching_tets_backward(&grid, &mesh, &up).unwrap();
    let h = 1e-4;
    let mut errors = Vec::new();
    for i in (0..grid.vertex_count()).filter(|i| grads.sdf[*i] != 0.0) {
        let (mut gp, mut gm) = (grid.clone(), grid.clone());
        gp.sdf[i] += h;
        gm.sdf[i] -= h;
        errors.push(rel_err(grads.sdf[i], (loss(&gp) - loss(&gm)) / (2.0 * h), 1e-6));
        for a in 0..3 {
            let (mut gp, mut gm) = (grid.clone(), grid.clone());
            gp.deform[i][a] += h;
            gm.deform[i][a] -= h;
            errors.push(rel_err(grads.deform[i][a], (loss(&gp) - loss(&gm)) / (2.0 * h), 1e-6));
        }
    }
    assert!(errors.len() > 100);
    let frac = pass_fraction(&errors, 1e-3);
    assert!(frac >= 0.99, "{frac:.4} of {} coordinates within tolerance", errors.len());
}

#[test]
fn uniform_slab_matches_beer_lambert() {
    for sigma in [-1.0f32, 0.0, 0.7, 2.5] {
        let density = Grid3::filled(4, 1, sigma).unwrap();
        let color = Grid3::from_fn(4, 3, |_| vec![0.75, 0.25, 0.5]).unwrap();
        let cam = CameraPose::look_at_origin([0.0, 0.0, 3.0], 30.0, 1, 1).unwrap();
        for steps in [16, 64] {
            let img = render(&density, &color, &cam, &VolumeSettings { steps, ..VolumeSettings::default() });
            let trans = (-math::softplus(sigma as f64) * 2.0).exp();
            for (c, base) in [0.75, 0.25, 0.5].into_iter().enumerate() {
                let want = base * (1.0 - trans) + trans;
                assert!((img.get(0, 0)[c] - want).abs() < 1e-12, "sigma {sigma} steps {steps}: {} vs {want}", img.get(0, 0)[c]);
            }
        }
    }
}

#[test]
fn doubling_ray_steps_converges() {
    let density = Grid3::from_fn(12, 1, |p| vec![2.0 - 4.0 * math::norm(p)]).unwrap();
    let color = Grid3::from_fn(12, 3, |p| vec![0.5 + 0.4 * p[0], 0.5, 0.5 - 0.4 * p[1]]).unwrap();
    let cam = CameraPose::orbit(10.0, 10.0, 3.0, 40.0, 12, 12).unwrap();
    let at = |steps| render(&density, &color, &cam, &VolumeSettings { steps, ..VolumeSettings::default() });
    let reference = at(4096);
    let errors: Vec<f64> = [32, 64, 128, 256].into_iter().map(|s| at(s).mse(&reference).sqrt()).collect();
    for w in errors.windows(2) {
        assert!(w[1] < 0.75 * w[0], "errors {errors:?}");
    }
}

#[test]
fn opacity_and_raster_coverage_agree() {
    let r = 0.6;
    let (_, mesh) = sphere_mesh(32, r);
    let density = Grid3::from_fn(48, 1, |p| vec![if math::norm(p) < r { 40.0 } else { -40.0 }]).unwrap();
    let color = Grid3::filled(48, 3, 0.5).unwrap();
    let tex = Grid3::filled(4, 3, 0.5).unwrap();
    let cam = CameraPose::orbit(30.0, 15.0, 2.5, 45.0, 32, 32).unwrap();
    let settings = VolumeSettings {
        steps: 256,
        ..VolumeSettings::default()
    };
    let mut opaque = Vec::new();
    for y in 0..32 {
        for x in 0..32 {
            let (_, t) = ray_weights(&density, &color, &cam, &settings, x, y);
            opaque.push(1.0 - t > 0.5);
        }
    }
    let raster = rasterize(&mesh, &tex, &cam, [1.0; 3]);
    let iou = coverage_iou(&opaque, &raster.coverage);
    assert!(iou >= 0.95, "IoU {iou}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn render_is_affine_in_color(seed in any::<u64>(), a in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let density = random_grid(&mut rng, 4, 1, -2.0, 2.0);
        // kept inside [0, 1] after mixing, where the output clamp is inactive
        let c1 = random_grid(&mut rng, 4, 3, 0.0, 0.5);
        let c2 = random_grid(&mut rng, 4, 3, 0.0, 0.5);
        let mix = Grid3::from_values(4, 3, c1.values().iter().zip(c2.values()).map(|(x, y)| (*x as f64 + a * *y as f64) as f32).collect()).unwrap();
        let cam = CameraPose::orbit(rng.random_range(-180.0..180.0), 10.0, 2.5, 45.0, 4, 4).unwrap();
        let s = VolumeSettings { steps: 16, background: [0.0; 3], ..VolumeSettings::default() };
        let (r1, r2, rm) = (render(&density, &c1, &cam, &s), render(&density, &c2, &cam, &s), render(&density, &mix, &cam, &s));
        for i in 0..r1.pixels.len() {
            prop_assert!((rm.pixels[i] - (r1.pixels[i] + a * r2.pixels[i])).abs() < 1e-5);
        }
    }

    #[test]
    fn compositing_weights_partition_unity(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let density = random_grid(&mut rng, 5, 1, -3.0, 4.0);
        let color = Grid3::filled(5, 3, 0.5).unwrap();
        let cam = CameraPose::orbit(rng.random_range(-180.0..180.0), rng.random_range(-30.0..30.0), 2.5, 45.0, 6, 6).unwrap();
        let s = VolumeSettings { steps: 24, ..VolumeSettings::default() };
        for y in 0..6 {
            for x in 0..6 {
                let (w, t) = ray_weights(&density, &color, &cam, &s, x, y);
                prop_assert!(w.iter().all(|v| *v >= 0.0));
                prop_assert!((w.iter().sum::<f64>() + t - 1.0).abs() < 1e-12);
            }
        }
    }
}
