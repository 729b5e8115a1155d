use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use viewdiff::synthdata::container::HEADER_BYTES;
use viewdiff::synthdata::render::{pixel_to_plane, render_view};
use viewdiff::synthdata::{
    build_dataset, sample_pair, Dataset, Primitive, PrimitiveKind, SceneSpec, Split, ViewPair, ViewRig,
};

/// Projects the cuboid corners with an explicit rotation and fills the convex
/// hull of the projected points.
fn oracle_area(p: &Primitive, azimuth: f64, elevation: f64, size: usize) -> usize {
    let rot_y = |v: [f64; 3], a: f64| {
        let (s, c) = a.sin_cos();
        [c * v[0] + s * v[2], v[1], -s * v[0] + c * v[2]]
    };
    let rot_x = |v: [f64; 3], a: f64| {
        let (s, c) = a.sin_cos();
        [v[0], c * v[1] - s * v[2], s * v[1] + c * v[2]]
    };
    let mut pts = Vec::new();
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            for sz in [-1.0, 1.0] {
                let local = [sx * p.extents[0], sy * p.extents[1], sz * p.extents[2]];
                let obj = rot_y(local, p.yaw);
                let world = [obj[0] + p.center[0], obj[1] + p.center[1], obj[2] + p.center[2]];
                // undo the camera: spin the world by -azimuth, then tilt by elevation
                let cam = rot_x(rot_y(world, -azimuth.to_radians()), elevation.to_radians());
                pts.push((cam[0], cam[1]));
            }
        }
    }
    let hull = convex_hull(pts);
    let mut count = 0;
    for row in 0..size {
        for col in 0..size {
            let (u, v) = pixel_to_plane(row, col, size, size);
            if inside(&hull, u, v) {
                count += 1;
            }
        }
    }
    count
}

fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> = if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn inside(hull: &[(f64, f64)], x: f64, y: f64) -> bool {
    (0..hull.len()).all(|i| {
        let a = hull[i];
        let b = hull[(i + 1) % hull.len()];
        (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0) >= 0.0
    })
}

#[test]
fn cuboid_silhouette_matches_hull_oracle() {
    let cuboids = [
        ([0.0, 0.0, 0.0], [0.5, 0.3, 0.2], 0.3),
        ([0.1, -0.2, 0.05], [0.2, 0.4, 0.35], 1.1),
        ([-0.2, 0.1, 0.2], [0.6, 0.15, 0.25], 2.5),
    ];
    for (center, extents, yaw) in cuboids {
        let prim = Primitive { kind: PrimitiveKind::Cuboid, center, extents, yaw, albedo: [90, 160, 220] };
        let spec = SceneSpec { seed: 0, primitives: vec![prim.clone()] };
        for az in [0.0f32, 90.0] {
            let view = render_view(&spec, az, 30.0);
            let rendered = view.mask().iter().filter(|&&m| m).count();
            let oracle = oracle_area(&prim, az as f64, 30.0, 32);
            assert!(rendered > 20);
            assert!(rendered.abs_diff(oracle) <= 2, "az {az}: {rendered} vs {oracle}");
        }
    }
}

#[test]
fn single_object_file_has_twelve_views_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("one.nvds");
    let rig = ViewRig::default();
    build_dataset(1, 7, &rig, &path).unwrap();
    let ds = Dataset::load(&path).unwrap();
    assert_eq!(ds.n_objects(), 1);
    assert_eq!(ds.objects[0].len(), 12);
    let fresh = Dataset::generate(1, 7, &rig).unwrap();
    assert_eq!(ds, fresh);
    assert_eq!(std::fs::read(&path).unwrap(), fresh.encode());
}

#[test]
fn file_size_follows_the_format() {
    assert_eq!(HEADER_BYTES, 15);
    // 4096 objects, 12 views, 32x32 RGBA plus two f32 angles per view
    assert_eq!(Dataset::file_size(4096, 12, 32, 32), 15 + 49_152 * 4_104);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("five.nvds");
    let hash = build_dataset(5, 3, &ViewRig::default(), &path).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, Dataset::file_size(5, 12, 32, 32));
    assert_eq!(hash, Dataset::load(&path).unwrap().content_hash());
}

#[test]
fn failed_write_leaves_no_partial_file() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("missing").join("x.nvds");
    let err = build_dataset(2, 0, &ViewRig::default(), &target).unwrap_err();
    assert_eq!(err.kind(), "io");
    assert!(std::fs::read_dir(dir.path()).unwrap().count() == 0);

    // a directory occupying the destination makes the final rename fail
    let blocked = dir.path().join("blocked.nvds");
    std::fs::create_dir(&blocked).unwrap();
    assert!(build_dataset(2, 0, &ViewRig::default(), &blocked).is_err());
    let names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, vec![std::ffi::OsString::from("blocked.nvds")]);
}

#[test]
fn corrupt_container_is_rejected() {
    let ds = Dataset::generate(1, 1, &ViewRig::default()).unwrap();
    let mut bytes = ds.encode();
    bytes.pop();
    assert_eq!(Dataset::decode(&bytes).unwrap_err().kind(), "format");
    bytes[0] = b'X';
    assert!(Dataset::decode(&bytes).is_err());
}

#[test]
fn identical_pair_has_zero_pose() {
    let ds = Dataset::generate(1, 0, &ViewRig::default()).unwrap();
    let p = ViewPair::new(&ds, 0, 4, 4);
    assert_eq!((p.pose.d_azimuth, p.pose.d_elevation), (0.0, 0.0));
    let p = ViewPair::new(&ds, 0, 4, 1);
    assert_eq!(p.pose.d_azimuth, 90.0);
}

#[test]
fn pair_histogram_is_uniform_over_ordered_pairs() {
    let ds = Dataset::generate(2, 0, &ViewRig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let draws = 100_000;
    let mut counts = [[0usize; 12]; 12];
    for _ in 0..draws {
        let p = sample_pair(&ds, &[0, 1], false, &mut rng);
        assert_ne!(p.target, p.reference);
        counts[p.target][p.reference] += 1;
    }
    let expected = draws as f64 / 132.0;
    let mut chi2 = 0.0;
    for (t, row) in counts.iter().enumerate() {
        for (r, &c) in row.iter().enumerate() {
            if t != r {
                chi2 += (c as f64 - expected).powi(2) / expected;
            }
        }
    }
    // 131 degrees of freedom; the 0.999 quantile is about 186
    assert!(chi2 < 186.0, "chi2 {chi2}");
}

#[test]
fn split_is_disjoint_and_covers_everything() {
    for n in [1usize, 2, 10, 49, 50, 4096] {
        let s = Split::by_object(n);
        assert_eq!(s.train.len() + s.val.len(), n);
        assert!(s.train.iter().all(|i| !s.val.contains(i)));
    }
    assert_eq!(Split::by_object(4096).val.len(), 82);
}
