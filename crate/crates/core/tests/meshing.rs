use distill3d::math;
use distill3d::prompts::{compensate, embed_image, geometry_prompt_difference};
use distill3d::render_volume::Image;
use distill3d::tetmesh::{build_tet_grid, marching_tets};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sphere_surfaces_are_closed_and_near_the_sphere(
        cx in -0.2f64..0.2, cy in -0.2f64..0.2, cz in -0.2f64..0.2, r in 0.25f64..0.7, res in 8usize..16,
    ) {
        let mut grid = build_tet_grid(res).unwrap();
        let c = [cx, cy, cz];
        grid.set_sdf_fn(|p| math::norm(math::sub(p, c)) - r);
        let mesh = marching_tets(&grid);
        prop_assert!(!mesh.is_empty());
        prop_assert!(mesh.edge_face_counts().values().all(|n| *n == 2));
        let worst = mesh.vertices.iter().map(|v| (math::norm(math::sub(*v, c)) - r).abs()).fold(0.0, f64::max);
        prop_assert!(worst <= 2.0 / res as f64, "off by {}", worst);
    }

    #[test]
    fn power_of_two_scaling_keeps_the_mesh(k in -6i32..6, r in 0.3f64..0.7) {
        let mut grid = build_tet_grid(8).unwrap();
        grid.set_sdf_fn(|p| math::norm(math::sub(p, [0.05, -0.1, 0.0])) - r);
        let a = marching_tets(&grid);
        grid.sdf.iter_mut().for_each(|s| *s *= 2f64.powi(k));
        let b = marching_tets(&grid);
        prop_assert_eq!(a.vertices, b.vertices);
        prop_assert_eq!(a.faces, b.faces);
    }

    #[test]
    fn compensation_undoes_the_difference(seed in any::<u64>(), p in prop::sample::select(vec![1usize, 2, 4, 8])) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut img = || Image::from_fn(16, 16, |_, _| [rng.random(), rng.random(), rng.random()]);
        let (a, b) = (embed_image(&img(), p).unwrap(), embed_image(&img(), p).unwrap());
        prop_assert!(geometry_prompt_difference(&a, &a).unwrap().vector.iter().all(|v| *v == 0.0));
        let back = compensate(&b, &geometry_prompt_difference(&a, &b).unwrap()).unwrap();
        prop_assert!(back.vector.iter().zip(&a.vector).all(|(x, y)| (x - y).abs() < 1e-12));
    }
}
