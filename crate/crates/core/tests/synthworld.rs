use neumap::synthworld::*;
use neumap::FormatError;

fn cfg() -> WorldConfig {
    WorldConfig { num_ref_views: 30, num_query_views: 8, num_holdout_views: 2, ..WorldConfig::default() }
}

fn percentile(mut v: Vec<f64>, p: f64) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[((v.len() - 1) as f64 * p).round() as usize]
}

#[test]
fn world_is_seeded_and_bounded() {
    let c = cfg();
    let (a, b) = (generate_world(&c).unwrap(), generate_world(&c).unwrap());
    assert_eq!(a.points, b.points);
    assert_eq!(a.descriptors, b.descriptors);
    assert_eq!(a.query_poses, b.query_poses);
    let other = generate_world(&WorldConfig { seed: 1, ..c.clone() }).unwrap();
    assert_ne!(a.points, other.points);
    for p in &a.points {
        for ax in 0..3 {
            assert!(p[ax] >= 0.0 && p[ax] < c.extent[ax]);
        }
    }
    for d in &a.descriptors {
        assert!((d.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    }
    for q in &a.query_poses {
        for r in &a.reference_poses {
            assert!((q.center() - r.center()).norm() >= c.query_baseline);
        }
    }
    assert!(generate_world(&WorldConfig { extent: [10.0, 0.0, 4.0], ..c }).is_err());
}

#[test]
fn same_point_descriptors_agree_across_views() {
    let ds = generate_dataset(&cfg()).unwrap();
    let views = &ds.reference.views;
    let mut sims = Vec::new();
    for (a, b) in views.iter().zip(views.iter().skip(1)) {
        for (i, pid) in a.keypoints.point_ids.iter().enumerate() {
            if let Some(j) = b.keypoints.point_ids.iter().position(|q| q == pid) {
                let (x, y) = (a.keypoints.descriptors.row(i), b.keypoints.descriptors.row(j));
                sims.push(x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>());
            }
        }
    }
    assert!(sims.len() > 1000);
    // 95th percentile of the similarity deficit
    assert!(percentile(sims, 0.05) > 0.9);
}

#[test]
fn observed_descriptors_identify_their_points() {
    let world = generate_world(&cfg()).unwrap();
    let (mut hits, mut total) = (0, 0);
    for v in 0..5 {
        let kp = observe(&world, ViewKind::Reference, v);
        for i in 0..kp.len() {
            let d = kp.descriptors.row(i);
            let best = (0..world.descriptors.len())
                .max_by(|a, b| {
                    let s = |k: usize| world.descriptors[k].iter().zip(d).map(|(p, q)| p * q).sum::<f64>();
                    s(*a).total_cmp(&s(*b))
                })
                .unwrap();
            hits += usize::from(best as u32 == kp.point_ids[i]);
            total += 1;
        }
    }
    assert!(hits as f64 > 0.99 * total as f64, "{hits}/{total}");
}

#[test]
fn triangulation_quality_at_default_noise() {
    let ds = generate_dataset(&cfg()).unwrap();
    let observed: Vec<&_> = ds
        .reference
        .points
        .iter()
        .filter(|p| {
            ds.reference.views.iter().filter(|v| v.keypoints.point_ids.contains(&p.id)).count() >= 2
        })
        .collect();
    let valid: Vec<_> = observed.iter().filter(|p| p.valid).collect();
    assert!(valid.len() as f64 >= 0.95 * observed.len() as f64);
    let errs: Vec<f64> = valid.iter().map(|p| (p.position - ds.truth.points[p.id as usize]).norm()).collect();
    assert!(percentile(errs, 0.5) < 0.02);
}

#[test]
fn dataset_round_trips_through_container() {
    let ds = generate_dataset(&WorldConfig { num_ref_views: 6, num_query_views: 2, ..WorldConfig::default() }).unwrap();
    let bytes = ds.to_bytes();
    let back = Dataset::from_bytes(&bytes).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.to_bytes(), bytes);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.nmds");
    ds.save(&path).unwrap();
    assert_eq!(Dataset::load(&path).unwrap(), ds);
    for cut in [2, 40, bytes.len() / 3, bytes.len() - 8] {
        assert!(matches!(Dataset::from_bytes(&bytes[..cut]), Err(FormatError::Truncated { .. })));
    }
    let m = ds.manifest();
    assert_eq!(m["format"], "NMDS");
    assert_eq!(m["reference_views"], 6);
    assert_eq!(m["valid_points"], ds.reference.num_valid_points());
    assert_eq!(m["config"]["seed"], 0);
}
