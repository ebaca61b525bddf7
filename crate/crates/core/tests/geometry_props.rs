use proptest::prelude::*;
use splatpatch::geometry::{build_index, estimate_normals, min_neighbor_distance, normalize_cloud};
use splatpatch::{NeighborIndex, PointCloud};

fn brute_knn(points: &[[f64; 3]], q: [f64; 3], k: usize) -> Vec<(f64, usize)> {
    let mut all: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let d2: f64 = (0..3).map(|a| (p[a] - q[a]).powi(2)).sum();
            (d2, i)
        })
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.truncate(k);
    all
}

fn coord() -> impl Strategy<Value = f64> {
    // Coarse grid values produce many exact distance ties.
    prop_oneof![(-4i32..=4).prop_map(|v| v as f64 * 0.25), -1.0f64..1.0]
}

fn points(max: usize) -> impl Strategy<Value = Vec<[f64; 3]>> {
    prop::collection::vec([coord(), coord(), coord()], 1..max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn knn_matches_brute_force(pts in points(200), q in [coord(), coord(), coord()], k in 1usize..20) {
        let k = k.min(pts.len());
        let index = NeighborIndex::from_positions(pts.clone()).unwrap();
        let (ids, dists) = index.k_nearest(q, k).unwrap();
        let expected = brute_knn(&pts, q, k);
        prop_assert_eq!(ids, expected.iter().map(|e| e.1).collect::<Vec<_>>());
        for (d, e) in dists.iter().zip(&expected) {
            prop_assert!((d - e.0.sqrt()).abs() <= 1e-12);
        }
    }

    #[test]
    fn normalization_round_trips(pts in points(100)) {
        let cloud = PointCloud::new(pts.clone(), vec![[0.5; 3]; pts.len()]).unwrap();
        if let Ok((norm, t)) = normalize_cloud(&cloud) {
            let mut max_abs: f64 = 0.0;
            for (p, q) in pts.iter().zip(norm.positions()) {
                let back = t.denormalize_point(*q);
                for a in 0..3 {
                    prop_assert!((back[a] - p[a]).abs() <= 1e-12 * (1.0 + p[a].abs()));
                    max_abs = max_abs.max(q[a].abs());
                }
            }
            // The widest axis spans exactly [-1, 1].
            prop_assert!((max_abs - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn min_distance_matches_brute_force(pts in points(80)) {
        prop_assume!(pts.len() >= 2);
        let cloud = PointCloud::new(pts.clone(), vec![[0.5; 3]; pts.len()]).unwrap();
        let index = build_index(&cloud).unwrap();
        let Ok(got) = min_neighbor_distance(&cloud, &index) else {
            // All points identical.
            prop_assert!(pts.iter().all(|p| *p == pts[0]));
            return Ok(());
        };
        let mut raw: Vec<f64> = (0..pts.len())
            .map(|i| {
                (0..pts.len())
                    .filter(|&j| j != i)
                    .map(|j| (0..3).map(|a| (pts[i][a] - pts[j][a]).powi(2)).sum::<f64>().sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let smallest = raw.iter().copied().filter(|&d| d > 0.0).fold(f64::INFINITY, f64::min);
        for d in raw.iter_mut().filter(|d| **d == 0.0) {
            *d = smallest;
        }
        for (g, r) in got.iter().zip(&raw) {
            prop_assert!((g - r).abs() <= 1e-12);
            prop_assert!(*g > 0.0);
        }
    }
}

#[test]
fn bbox_normalization_example() {
    // Supplement-style normalization: center of the bounding box and the
    // largest per-axis half-extent.
    let cloud = PointCloud::new(vec![[0.0, 0.0, 0.0], [4.0, 2.0, 1.0], [1.0, -2.0, 3.0]], vec![[0.5; 3]; 3]).unwrap();
    let (n, t) = normalize_cloud(&cloud).unwrap();
    assert_eq!(t.center, [2.0, 0.0, 1.5]);
    assert_eq!(t.scale, 2.0);
    assert_eq!(n.positions()[1], [1.0, 1.0, -0.25]);
}

#[test]
fn plane_normals_are_axis_aligned() {
    let mut pts = Vec::new();
    for i in 0..20 {
        for j in 0..20 {
            pts.push([i as f64 * 0.1, j as f64 * 0.1 + 0.013 * i as f64, 0.5]);
        }
    }
    let cloud = PointCloud::new(pts.clone(), vec![[0.5; 3]; pts.len()]).unwrap();
    let index = build_index(&cloud).unwrap();
    for n in estimate_normals(&cloud, &index, 16).unwrap() {
        assert!((n[2].abs() - 1.0).abs() < 1e-9, "{n:?}");
        assert!((n[0] * n[0] + n[1] * n[1] + n[2] * n[2] - 1.0).abs() < 1e-12);
    }
}

#[test]
fn tilted_plane_normals() {
    // Points on x + 2y + 2z = 0 with a small jitter-free lattice.
    let expected = [1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0];
    let mut pts = Vec::new();
    for i in 0..15 {
        for j in 0..15 {
            let (u, v) = (i as f64 * 0.07, j as f64 * 0.05);
            let p = [2.0 * u, -u + v, -v];
            pts.push(p);
        }
    }
    let cloud = PointCloud::new(pts.clone(), vec![[0.5; 3]; pts.len()]).unwrap();
    let index = build_index(&cloud).unwrap();
    for n in estimate_normals(&cloud, &index, 16).unwrap() {
        let dot: f64 = (0..3).map(|a| n[a] * expected[a]).sum();
        assert!((dot.abs() - 1.0).abs() < 1e-9, "{n:?}");
    }
}

#[test]
fn sphere_normals_are_radial() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let pts: Vec<[f64; 3]> = (0..4000)
        .map(|_| loop {
            let v = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0f64)];
            let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if l > 0.1 && l <= 1.0 {
                break [v[0] / l, v[1] / l, v[2] / l];
            }
        })
        .collect();
    let cloud = PointCloud::new(pts.clone(), vec![[0.5; 3]; pts.len()]).unwrap();
    let index = build_index(&cloud).unwrap();
    let cos15 = 15f64.to_radians().cos();
    let good = estimate_normals(&cloud, &index, 16)
        .unwrap()
        .iter()
        .zip(&pts)
        .filter(|(n, p)| (n[0] * p[0] + n[1] * p[1] + n[2] * p[2]).abs() >= cos15)
        .count();
    assert!(good as f64 >= 0.95 * pts.len() as f64, "{good}");
}
