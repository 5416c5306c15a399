//! Built-in invariant suite run by `distill3d check`.
//!
//! Every check is small enough for the whole suite to finish in about a
//! second; the integration tests cover the same ground at full size.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffusion::{add_noise, Codec, DeltaTargetDenoiser, Denoiser, DenoiserCondition, Latent, NoiseSchedule, ResidualScoreModel, TimestepConfig, TimestepSample};
use crate::distill::{sds_grad, DistillSettings, ImageState};
use crate::fields::Grid3;
use crate::prompts::{compensate, embed_image, geometry_prompt_difference};
use crate::render_mesh::{rasterize, rasterize_backward};
use crate::render_volume::{render, render_backward, CameraPose, Image, VolumeSettings};
use crate::tetmesh::{build_tet_grid, marching_tets, marching_tets_backward};
use crate::math;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn() -> Result<(), String>;

const CHECKS: &[(&str, Check)] = &[
    ("trilinear reproduces linear fields", trilinear_linear),
    ("trilinear backward matches finite differences", trilinear_fd),
    ("volume render backward matches finite differences", volume_fd),
    ("marching tets sphere is closed and accurate", marching_sphere),
    ("marching tets is invariant to S scaling", marching_scaling),
    ("marching tets backward matches finite differences", marching_fd),
    ("rasterizer texture backward matches finite differences", raster_fd),
    ("codec encode and adjoint agree", codec_adjoint),
    ("delta-oracle residual identity", delta_identity),
    ("residual score model starts at its base", residual_init),
    ("distillation has a zero gradient at the oracle target", sds_fixed_point),
    ("prompt difference and compensation identities", prompt_identities),
];

pub fn run_suite() -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|(name, f)| {
            let r = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
            CheckResult {
                name,
                passed: r.is_ok(),
                detail: r.err().unwrap_or_default(),
            }
        })
        .collect()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn random_grid(rng: &mut ChaCha8Rng, res: usize, ch: usize, lo: f64, hi: f64) -> Grid3 {
    let values = (0..res * res * res * ch).map(|_| rng.random_range(lo..hi) as f32).collect();
    Grid3::from_values(res, ch, values).expect("valid grid")
}

fn trilinear_linear() -> Result<(), String> {
    let g = Grid3::from_fn(5, 1, |p| vec![0.3 * p[0] - 0.2 * p[1] + 0.5 * p[2] + 0.1]).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let p = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let want = 0.3 * p[0] - 0.2 * p[1] + 0.5 * p[2] + 0.1;
        let got = g.sample_trilinear(p).value[0];
        ensure((got - want).abs() < 1e-6, || format!("{got} vs {want} at {p:?}"))?;
        let st = g.stencil(p).ok_or("interior point has no stencil")?;
        let sum: f64 = st.weights.iter().sum();
        ensure((sum - 1.0).abs() < 1e-12 && st.weights.iter().all(|w| *w >= 0.0), || format!("weights {:?}", st.weights))?;
    }
    Ok(())
}

fn trilinear_fd() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = random_grid(&mut rng, 4, 3, -1.0, 1.0);
    let p = [0.13, -0.41, 0.27];
    let up = [0.7, -0.2, 1.1];
    for (idx, w) in g.sample_trilinear_backward(p, &up) {
        let h = 1e-2f32;
        let mut gp = g.clone();
        gp.values_mut()[idx] += h;
        let mut gm = g.clone();
        gm.values_mut()[idx] -= h;
        let realized = (gp.values()[idx] - gm.values()[idx]) as f64;
        let (fp, fm) = (gp.sample_trilinear(p).value, gm.sample_trilinear(p).value);
        let num: f64 = (0..3).map(|c| up[c] * (fp[c] - fm[c])).sum::<f64>() / realized;
        ensure(rel_err(num, w, 1e-8) < 1e-5, || format!("node {idx}: {num} vs {w}"))?;
    }
    Ok(())
}

fn volume_fd() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let density = random_grid(&mut rng, 5, 1, -1.0, 2.0);
    let color = random_grid(&mut rng, 5, 3, 0.1, 0.9);
    let cam = CameraPose::orbit(30.0, 20.0, 2.5, 45.0, 6, 6).map_err(|e| e.to_string())?;
    let settings = VolumeSettings {
        steps: 24,
        ..VolumeSettings::default()
    };
    let up: Vec<f64> = (0..6 * 6 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = |d: &Grid3, c: &Grid3| -> f64 {
        render(d, c, &cam, &settings).pixels.iter().zip(&up).map(|(p, u)| p * u).sum()
    };
    let g = render_backward(&density, &color, &cam, &settings, &up);
    let mut worst = 0.0f64;
    for idx in (0..density.values().len()).step_by(7) {
        let h = 1e-3f32;
        let (mut dp, mut dm) = (density.clone(), density.clone());
        dp.values_mut()[idx] += h;
        dm.values_mut()[idx] -= h;
        let realized = (dp.values()[idx] - dm.values()[idx]) as f64;
        let num = (loss(&dp, &color) - loss(&dm, &color)) / realized;
        worst = worst.max(rel_err(num, g.density[idx], 1e-4));
    }
    ensure(worst < 1e-3, || format!("worst density relative error {worst:.2e}"))
}

fn marching_sphere() -> Result<(), String> {
    let mut grid = build_tet_grid(16).map_err(|e| e.to_string())?;
    let r = 0.6;
    grid.set_sdf_fn(|p| math::norm(p) - r);
    let mesh = marching_tets(&grid);
    ensure(!mesh.is_empty() && mesh.is_watertight(), || "sphere mesh is not closed".into())?;
    let worst = mesh.vertices.iter().map(|v| (math::norm(*v) - r).abs()).fold(0.0, f64::max);
    ensure(worst <= 2.0 / 16.0, || format!("vertex off the sphere by {worst}"))
}

fn marching_scaling() -> Result<(), String> {
    let mut grid = build_tet_grid(8).map_err(|e| e.to_string())?;
    grid.set_sdf_fn(|p| math::norm(math::sub(p, [0.1, -0.05, 0.2])) - 0.5);
    let a = marching_tets(&grid);
    grid.sdf.iter_mut().for_each(|s| *s *= 4.0);
    let b = marching_tets(&grid);
    ensure(a.vertices == b.vertices && a.faces == b.faces, || "scaled SDF changed the mesh".into())
}

fn marching_fd() -> Result<(), String> {
    let mut grid = build_tet_grid(8).map_err(|e| e.to_string())?;
    grid.set_sdf_fn(|p| math::norm(p) - 0.55);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mesh = marching_tets(&grid);
    let up: Vec<math::Vec3> = mesh.vertices.iter().map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
    let loss = |g: &crate::tetmesh::TetGrid| -> f64 {
        let m = marching_tets(g);
        m.vertices.iter().zip(&up).map(|(v, u)| math::dot(*v, *u)).sum()
    };
    let grads = marching_tets_backward(&grid, &mesh, &up).map_err(|e| e.to_string())?;
    let h = 1e-6;
    for i in (0..grid.vertex_count()).filter(|i| grads.sdf[*i] != 0.0).take(20) {
        let (mut gp, mut gm) = (grid.clone(), grid.clone());
        gp.sdf[i] += h;
        gm.sdf[i] -= h;
        let num = (loss(&gp) - loss(&gm)) / (2.0 * h);
        ensure(rel_err(num, grads.sdf[i], 1e-6) < 1e-4, || format!("S[{i}]: {num} vs {}", grads.sdf[i]))?;
    }
    Ok(())
}

fn raster_fd() -> Result<(), String> {
    let mut grid = build_tet_grid(8).map_err(|e| e.to_string())?;
    grid.set_sdf_fn(|p| math::norm(p) - 0.6);
    let mesh = marching_tets(&grid);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tex = random_grid(&mut rng, 6, 3, 0.2, 0.8);
    let cam = CameraPose::orbit(20.0, 10.0, 2.2, 50.0, 8, 8).map_err(|e| e.to_string())?;
    let up: Vec<f64> = (0..8 * 8 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let state = rasterize(&mesh, &tex, &cam, [1.0; 3]);
    let g = rasterize_backward(&state, &mesh, &tex, Some(&up), None).map_err(|e| e.to_string())?;
    let loss = |t: &Grid3| -> f64 { rasterize(&mesh, t, &cam, [1.0; 3]).rgb.pixels.iter().zip(&up).map(|(p, u)| p * u).sum() };
    for idx in (0..tex.values().len()).filter(|i| g.texture[*i] != 0.0).take(20) {
        let (mut tp, mut tm) = (tex.clone(), tex.clone());
        tp.values_mut()[idx] += 1e-3;
        tm.values_mut()[idx] -= 1e-3;
        let realized = (tp.values()[idx] - tm.values()[idx]) as f64;
        let num = (loss(&tp) - loss(&tm)) / realized;
        ensure(rel_err(num, g.texture[idx], 1e-6) < 1e-3, || format!("texture[{idx}]: {num} vs {}", g.texture[idx]))?;
    }
    Ok(())
}

fn codec_adjoint() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for codec in [Codec::Identity, Codec::AvgPool(2)] {
        let img = Image::from_fn(8, 8, |_, _| [rng.random(), rng.random(), rng.random()]);
        let z = codec.encode(&img).map_err(|e| e.to_string())?;
        let u = Latent { data: (0..z.len()).map(|_| rng.random_range(-1.0..1.0)).collect(), ..z.clone() };
        let lhs = z.dot(&u);
        let rhs: f64 = img.pixels.iter().zip(codec.encode_adjoint(&u)).map(|(a, b)| a * b).sum();
        ensure((lhs - rhs).abs() < 1e-9, || format!("{codec:?}: {lhs} vs {rhs}"))?;
    }
    Ok(())
}

fn delta_identity() -> Result<(), String> {
    let schedule = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let shape = [3, 4, 4];
    let target = Latent::from_data(shape, (0..48).map(|_| rng.random_range(-1.0..1.0)).collect()).map_err(|e| e.to_string())?;
    let d = DeltaTargetDenoiser::new(target.clone(), schedule.clone());
    for _ in 0..100 {
        let z = Latent::from_data(shape, (0..48).map(|_| rng.random_range(-1.0..1.0)).collect()).map_err(|e| e.to_string())?;
        let s = TimestepSample::draw(&mut rng, shape, &TimestepConfig::default(), &schedule);
        let noisy = add_noise(&z, &s, &schedule).map_err(|e| e.to_string())?;
        let eps = d.predict(&noisy, s.t, &DenoiserCondition::default()).map_err(|e| e.to_string())?;
        let ab = schedule.alpha_bar(s.t);
        let c = (ab / (1.0 - ab)).sqrt();
        for i in 0..48 {
            let want = c * (z.data[i] - target.data[i]);
            let got = eps.data[i] - s.eps.data[i];
            ensure((got - want).abs() < 1e-6, || format!("t={}: {got} vs {want}", s.t))?;
        }
    }
    Ok(())
}

fn residual_init() -> Result<(), String> {
    let base = DeltaTargetDenoiser::new(Latent::filled([3, 4, 4], 0.3), NoiseSchedule::default());
    let model = ResidualScoreModel::new(Box::new(base.clone()), [3, 4, 4], 16, 1000, 1e-3, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let z = Latent::from_data([3, 4, 4], (0..48).map(|_| rng.sample(StandardNormal)).collect()).map_err(|e| e.to_string())?;
    let cond = DenoiserCondition::default();
    let (a, b) = (model.predict(&z, 321, &cond), base.predict(&z, 321, &cond));
    ensure(matches!((&a, &b), (Ok(x), Ok(y)) if x == y), || "initial residual model differs from its base".into())
}

fn sds_fixed_point() -> Result<(), String> {
    let img = Image::from_fn(8, 8, |x, y| [x as f64 / 8.0, 0.5, y as f64 / 8.0]);
    let schedule = NoiseSchedule::default();
    let d = DeltaTargetDenoiser::new(Codec::Identity.encode(&img).map_err(|e| e.to_string())?, schedule.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let step = sds_grad(&ImageState { image: img }, &d, &DenoiserCondition::default(), &schedule, &DistillSettings::default(), &mut rng)
        .map_err(|e| e.to_string())?;
    ensure(step.gradients.max_abs() < 1e-6, || format!("max gradient {}", step.gradients.max_abs()))
}

fn prompt_identities() -> Result<(), String> {
    let a = Image::from_fn(16, 16, |x, y| [x as f64 / 16.0, y as f64 / 16.0, 0.5]);
    let b = Image::from_fn(16, 16, |x, _| [0.5, 0.25, x as f64 / 32.0]);
    let (ea, eb) = (embed_image(&a, 4).map_err(|e| e.to_string())?, embed_image(&b, 4).map_err(|e| e.to_string())?);
    let same = geometry_prompt_difference(&ea, &ea).map_err(|e| e.to_string())?;
    ensure(same.vector.iter().all(|v| *v == 0.0), || "same-view difference is not zero".into())?;
    ensure(compensate(&eb, &same).map_err(|e| e.to_string())? == eb, || "zero compensation changed the embedding".into())?;
    let d = geometry_prompt_difference(&ea, &eb).map_err(|e| e.to_string())?;
    let c = compensate(&eb, &d).map_err(|e| e.to_string())?;
    let worst = c.vector.iter().zip(&ea.vector).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    ensure(worst < 1e-12, || format!("y_b + (y_a - y_b) misses y_a by {worst}"))
}
