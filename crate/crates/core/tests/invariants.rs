use objsdf::evalmesh::{chamfer_distance, marching_cubes, miou, psnr};
use objsdf::geometry::{compose_min, Aabb, RigidTransform, Vec3};
use objsdf::rendering::{density_from_sdf, quadrature_weights, semantic_from_sdf};
use proptest::prelude::*;

fn vec3() -> impl Strategy<Value = Vec3> {
    (-2.0..2.0f64, -2.0..2.0f64, -2.0..2.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

proptest! {
    #[test]
    fn compose_min_matches_scan(d in prop::collection::vec(-3.0..3.0f64, 1..9)) {
        let (v, i) = compose_min(&d).unwrap();
        let best = d.iter().copied().fold(f64::INFINITY, f64::min);
        prop_assert_eq!(v, best);
        prop_assert_eq!(i, d.iter().position(|&x| x == best).unwrap());
    }

    #[test]
    fn quadrature_is_a_partition_of_unity(
        sigma in prop::collection::vec(0.0..50.0f64, 1..40),
        scale in 1e-3..0.2f64,
    ) {
        let delta: Vec<f64> = (0..sigma.len()).map(|j| scale * (1.0 + (j % 3) as f64)).collect();
        let q = quadrature_weights(&sigma, &delta).unwrap();
        prop_assert_eq!(q.transmittance[0], 1.0);
        for j in 1..sigma.len() {
            prop_assert!(q.transmittance[j] <= q.transmittance[j - 1]);
        }
        prop_assert!(q.weights.iter().all(|w| *w >= 0.0));
        let total: f64 = q.weights.iter().sum();
        prop_assert!((total + q.residual - 1.0).abs() < 1e-12);
        prop_assert!((q.opacity - total).abs() < 1e-12);
    }

    #[test]
    fn density_is_bounded_and_monotone(d in -5.0..5.0f64, e in 1e-6..1.0f64, beta in 1e-4..1.0f64) {
        let a = density_from_sdf(d, beta);
        let b = density_from_sdf(d + e, beta);
        prop_assert!(a >= 0.0 && a <= 1.0 / beta);
        prop_assert!(b <= a);
    }

    #[test]
    fn semantic_lies_in_open_range(d in -0.5..0.5f64, gamma in 1.0..40.0f64) {
        let s = semantic_from_sdf(d, gamma);
        prop_assert!(s > 0.0 && s < gamma);
    }

    #[test]
    fn pose_inverse_round_trips(axis in vec3(), angle in -3.0..3.0f64, t in vec3(), p in vec3()) {
        prop_assume!(axis.norm() > 1e-3);
        let pose = RigidTransform::from_axis_angle(axis, angle, t).unwrap();
        let back = pose.inverse_apply_point(&pose.apply_point(&p));
        prop_assert!((back - p).norm() < 1e-12);
        let again = RigidTransform::from_row_major(&pose.to_row_major()).unwrap();
        prop_assert_eq!(again.to_row_major(), pose.to_row_major());
    }

    #[test]
    fn chamfer_is_symmetric(
        a in prop::collection::vec(vec3(), 1..40),
        b in prop::collection::vec(vec3(), 1..40),
    ) {
        prop_assert_eq!(chamfer_distance(&a, &b).unwrap(), chamfer_distance(&b, &a).unwrap());
    }

    #[test]
    fn chamfer_does_not_grow_with_coincident_points(
        a in prop::collection::vec(vec3(), 1..30),
        b in prop::collection::vec(vec3(), 1..30),
        pick in 0usize..30,
    ) {
        let before = chamfer_distance(&a, &b).unwrap();
        let mut a2 = a.clone();
        a2.push(b[pick % b.len()]);
        prop_assert!(chamfer_distance(&a2, &b).unwrap() <= before + 1e-15);
    }

    #[test]
    fn psnr_falls_with_noise(
        img in prop::collection::vec((0.2..0.8f64, 0.2..0.8f64, 0.2..0.8f64), 4..30),
        signs in prop::collection::vec(any::<bool>(), 30),
        amp in 0.001..0.09f64,
    ) {
        let a: Vec<[f64; 3]> = img.iter().map(|&(r, g, b)| [r, g, b]).collect();
        let noisy = |s: f64| -> Vec<[f64; 3]> {
            a.iter().enumerate().map(|(i, p)| {
                let sign = if signs[i % signs.len()] { 1.0 } else { -1.0 };
                p.map(|v| v + sign * s)
            }).collect()
        };
        let p1 = psnr(&a, &noisy(amp)).unwrap();
        let p2 = psnr(&a, &noisy(amp * 1.5)).unwrap();
        prop_assert!(p2 < p1);
    }

    #[test]
    fn miou_ignores_label_names(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60),
        perm in Just([0usize, 1, 2, 3]).prop_shuffle(),
    ) {
        let pred: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let gt: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let a = miou(&pred, &gt, 4).unwrap().mean;
        let pp: Vec<usize> = pred.iter().map(|&l| perm[l]).collect();
        let pg: Vec<usize> = gt.iter().map(|&l| perm[l]).collect();
        let b = miou(&pp, &pg, 4).unwrap().mean;
        prop_assert!((a - b).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mesh_vertices_respect_the_residual_bound(
        c in (-0.3..0.3f64, -0.3..0.3f64, -0.3..0.3f64),
        r in 0.2..0.6f64,
        res in 6usize..20,
    ) {
        let c = Vec3::new(c.0, c.1, c.2);
        let bbox = Aabb::cube(1.0).unwrap();
        let field = move |p: &Vec3| (p - c).norm() - r;
        let mesh = marching_cubes(&field, &bbox, res).unwrap();
        mesh.validate().unwrap();
        let cell = 2.0 / res as f64;
        prop_assert!(!mesh.is_empty());
        for v in &mesh.vertices {
            prop_assert!(field(v).abs() <= cell * 3f64.sqrt());
        }
    }
}
