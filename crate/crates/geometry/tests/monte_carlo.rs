//! Noisy-data statistics for triangulation, PnP and RANSAC, checked against
//! percentile bounds over seeded trials.

use nalgebra::{Vector2, Vector3};
use neumap_geometry::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn k() -> Intrinsics {
    Intrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
}

fn percentile(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let idx = ((v.len() as f64 - 1.0) * q).round() as usize;
    v[idx]
}

/// Camera looking at `target` from a random direction at `dist` meters.
fn camera_around(rng: &mut ChaCha8Rng, target: Vector3<f64>, dist: f64) -> Pose {
    loop {
        let az: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let el: f64 = rng.random_range(-0.4..0.4);
        let c = target + dist * Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
        if let Ok(p) = Pose::look_at(c, target, Vector3::z()) {
            return p;
        }
    }
}

fn noisy_corrs(rng: &mut ChaCha8Rng, pose: &Pose, n: usize, sigma: f64) -> Vec<Correspondence> {
    let noise = Normal::new(0.0, sigma).unwrap();
    let mut out = Vec::new();
    while out.len() < n {
        let cam = Vector3::new(rng.random_range(-2.5..2.5), rng.random_range(-1.8..1.8), rng.random_range(3.0..7.0));
        let world = pose.rotation.transpose() * (cam - pose.translation);
        if let Some(px) = project(pose, &k(), &world).pixel() {
            let px = px + Vector2::new(noise.sample(rng), noise.sample(rng));
            out.push(Correspondence::new(px, world, 1.0));
        }
    }
    out
}

#[test]
fn triangulation_twenty_noisy_views() {
    let mut errs = Vec::new();
    let mut valid = 0;
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let point = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let poses: Vec<Pose> = (0..20).map(|_| camera_around(&mut rng, point, 5.0)).collect();
        let noise = Normal::new(0.0, 0.5).unwrap();
        let obs: Vec<Observation> = poses
            .iter()
            .enumerate()
            .map(|(view, p)| Observation {
                view,
                pixel: project(p, &k(), &point).pixel().unwrap()
                    + Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng)),
            })
            .collect();
        let ks = vec![k(); poses.len()];
        if triangulate_dlt(0, &obs, &poses, &ks, &TriangulationOptions::default()).unwrap().valid {
            valid += 1;
        }
        // position statistics regardless of the validity gate
        let loose = TriangulationOptions { reproj_tol: f64::INFINITY, min_angle_deg: 0.0 };
        let p = triangulate_dlt(0, &obs, &poses, &ks, &loose).unwrap();
        errs.push((p.position - point).norm());
    }
    let p95 = percentile(errs, 0.95);
    println!("triangulation p95 error {p95:.5} m, {valid}/100 valid");
    assert!(p95 < 0.02);
    assert!(valid >= 95);
}

#[test]
fn pnp_with_one_pixel_noise() {
    let mut errs = Vec::new();
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + trial);
        let truth = camera_around(&mut rng, Vector3::zeros(), 5.0);
        let corrs = noisy_corrs(&mut rng, &truth, 50, 1.0);
        let est = pnp_solve(&corrs, &k(), &PnpOptions::default()).unwrap();
        errs.push(pose_error(&est, &truth).0);
    }
    let p95 = percentile(errs, 0.95);
    println!("pnp p95 center error {p95:.5} m");
    assert!(p95 < 0.02);
}

#[test]
fn ransac_with_thirty_percent_outliers() {
    let mut good = 0;
    let mut recall_ok = 0;
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + trial);
        let truth = camera_around(&mut rng, Vector3::zeros(), 5.0);
        let mut corrs = noisy_corrs(&mut rng, &truth, 140, 1.0);
        for _ in 0..60 {
            corrs.push(Correspondence::new(
                Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)),
                Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)),
                1.0,
            ));
        }
        let opts = RansacOptions { seed: trial, ..Default::default() };
        let out = ransac_pnp(&corrs, &k(), &opts).unwrap();
        let RansacOutcome::Localized { pose, inliers } = out else { continue };
        let recovered = inliers[..140].iter().filter(|b| **b).count();
        if recovered as f64 >= 0.95 * 140.0 {
            recall_ok += 1;
        }
        if pose_error(&pose, &truth).0 < 0.05 {
            good += 1;
        }
    }
    println!("ransac: {good}/100 within 0.05 m, {recall_ok}/100 with >=95% inlier recall");
    assert!(good >= 95);
    assert!(recall_ok >= 95);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn noiseless_triangulation_round_trip(
        x in -2.0f64..2.0, y in -2.0f64..2.0, z in -2.0f64..2.0, seed in 0u64..1000, views in 2usize..8,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let point = Vector3::new(x, y, z);
        let poses: Vec<Pose> = (0..views).map(|_| camera_around(&mut rng, Vector3::zeros(), 6.0)).collect();
        let obs: Vec<Observation> = poses
            .iter()
            .enumerate()
            .map(|(view, p)| Observation { view, pixel: project(p, &k(), &point).pixel().unwrap() })
            .collect();
        let ks = vec![k(); views];
        let p = triangulate_dlt(0, &obs, &poses, &ks, &TriangulationOptions::default()).unwrap();
        if p.valid {
            prop_assert!((p.position - point).norm() < 1e-8);
        }
    }

    #[test]
    fn pose_error_is_symmetric(a in prop::array::uniform6(-2.0f64..2.0), b in prop::array::uniform6(-2.0f64..2.0)) {
        let pa = Pose::from_center(so3_exp(&Vector3::new(a[0], a[1], a[2])), Vector3::new(a[3], a[4], a[5]));
        let pb = Pose::from_center(so3_exp(&Vector3::new(b[0], b[1], b[2])), Vector3::new(b[3], b[4], b[5]));
        let (t1, r1) = pose_error(&pa, &pb);
        let (t2, r2) = pose_error(&pb, &pa);
        prop_assert!((t1 - t2).abs() < 1e-12);
        prop_assert!((r1 - r2).abs() < 1e-9);
    }

    #[test]
    fn noiseless_pnp_exact(seed in 0u64..10_000, n in 6usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = camera_around(&mut rng, Vector3::zeros(), 5.0);
        let corrs = noisy_corrs(&mut rng, &truth, n, 0.0);
        let est = pnp_solve(&corrs, &k(), &PnpOptions::default()).unwrap();
        let (t, r) = pose_error(&est, &truth);
        prop_assert!(t < 1e-6 && r.to_radians() < 1e-6, "t={t} r={r}");
    }
}
