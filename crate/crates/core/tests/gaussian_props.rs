use std::f64::consts::PI;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatpatch::gaussians::*;
use splatpatch::geometry::{build_index, estimate_normals, min_neighbor_distance, normalize_cloud};
use splatpatch::{NormalizationTransform, PointCloud, Space};

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn random_unit(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0f64)];
        let l = dot(v, v).sqrt();
        if l > 0.1 && l <= 1.0 {
            return [v[0] / l, v[1] / l, v[2] / l];
        }
    }
}

fn frame(n: [f64; 3], alpha: f64) -> SplatFrame {
    let q = normal_angle_to_quaternion(n, alpha).unwrap();
    assert!((q.norm() - 1.0).abs() < 1e-12);
    quaternion_to_frame(&q).unwrap()
}

#[test]
fn frames_follow_the_normal() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut normals: Vec<[f64; 3]> = (0..1000).map(|_| random_unit(&mut rng)).collect();
    normals.extend([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0], [0.0, 1e-9, -1.0]]);
    for n in normals {
        let n = {
            let l = dot(n, n).sqrt();
            [n[0] / l, n[1] / l, n[2] / l]
        };
        let alpha = rng.random_range(-10.0..10.0);
        let f = frame(n, alpha);
        for a in 0..3 {
            assert!((f.n[a] - n[a]).abs() < 1e-9, "{n:?} -> {:?}", f.n);
        }
        assert!((dot(f.t_u, f.t_u) - 1.0).abs() < 1e-12);
        assert!((dot(f.t_v, f.t_v) - 1.0).abs() < 1e-12);
        assert!(dot(f.t_u, f.t_v).abs() < 1e-12);
        assert!(dot(f.t_u, f.n).abs() < 1e-9);
        let c = cross(f.t_u, f.t_v);
        for a in 0..3 {
            assert!((c[a] - f.n[a]).abs() < 1e-9);
        }
    }
}

#[test]
fn angle_turns_the_frame_about_the_normal() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..500 {
        let n = random_unit(&mut rng);
        let alpha = rng.random_range(-PI..PI);
        let base = frame(n, 0.0);
        let turned = frame(n, alpha);
        let r = rodrigues(n, alpha);
        let expect_u = splatpatch::vec3::mat3_vec(&r, base.t_u);
        let expect_v = splatpatch::vec3::mat3_vec(&r, base.t_v);
        for a in 0..3 {
            assert!((turned.t_u[a] - expect_u[a]).abs() < 1e-9);
            assert!((turned.t_v[a] - expect_v[a]).abs() < 1e-9);
        }
        // The tangent turns by alpha in the splat plane.
        assert!((dot(turned.t_u, base.t_u) - alpha.cos()).abs() < 1e-9);
        assert!((dot(turned.t_u, base.t_v) - alpha.sin()).abs() < 1e-9);
    }
}

#[test]
fn quaternion_matrix_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..500 {
        let m = orientation_matrix(random_unit(&mut rng), rng.random_range(-PI..PI)).unwrap();
        let back = Quaternion::from_matrix(&m).to_matrix();
        for r in 0..3 {
            for c in 0..3 {
                assert!((back[r][c] - m[r][c]).abs() < 1e-12);
            }
        }
    }
    assert!(orientation_matrix([0.0; 3], 0.0).is_err());
}

/// Textbook real spherical harmonics, written out from their closed forms.
fn sh_reference(d: [f64; 3]) -> [f64; 9] {
    let [x, y, z] = d;
    let c0 = 0.5 * (1.0 / PI).sqrt();
    let c1 = (3.0 / (4.0 * PI)).sqrt();
    let c2 = 0.5 * (15.0 / PI).sqrt();
    let c20 = 0.25 * (5.0 / PI).sqrt();
    let c22 = 0.25 * (15.0 / PI).sqrt();
    [
        c0,
        -c1 * y,
        c1 * z,
        -c1 * x,
        c2 * x * y,
        -c2 * y * z,
        c20 * (3.0 * z * z - 1.0),
        -c2 * x * z,
        c22 * (x * x - y * y),
    ]
}

#[test]
fn sh_basis_matches_closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..200 {
        let d = random_unit(&mut rng);
        let got = sh_basis(d);
        let want = sh_reference(d);
        for i in 0..9 {
            assert!((got[i] - want[i]).abs() < 1e-12, "basis {i}: {} vs {}", got[i], want[i]);
        }
    }
}

#[test]
fn sh_basis_is_orthonormal() {
    // Fibonacci-lattice quadrature over the sphere.
    let n = 200_000;
    let golden = PI * (3.0 - 5f64.sqrt());
    let mut gram = [[0.0f64; 9]; 9];
    for i in 0..n {
        let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
        let r = (1.0 - z * z).sqrt();
        let phi = golden * i as f64;
        let b = sh_basis([r * phi.cos(), r * phi.sin(), z]);
        for a in 0..9 {
            for c in 0..9 {
                gram[a][c] += b[a] * b[c];
            }
        }
    }
    let w = 4.0 * PI / n as f64;
    for a in 0..9 {
        for c in 0..9 {
            let want = if a == c { 1.0 } else { 0.0 };
            assert!((gram[a][c] * w - want).abs() < 1e-4, "({a},{c}) = {}", gram[a][c] * w);
        }
    }
}

fn init_set(n: usize, seed: u64) -> (Gaussian2DSet<f64>, PointCloud, NormalizationTransform) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<[f64; 3]> = (0..n).map(|_| random_unit(&mut rng)).collect();
    let cols: Vec<[f64; 3]> = (0..n)
        .map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
        .collect();
    let cloud = PointCloud::new(pts, cols).unwrap();
    let (norm, t) = normalize_cloud(&cloud).unwrap();
    let index = build_index(&norm).unwrap();
    let normals = estimate_normals(&norm, &index, 16).unwrap();
    let dists = min_neighbor_distance(&norm, &index).unwrap();
    let norm = norm.with_normals(normals).unwrap();
    (initialize_gaussians(&norm, &dists).unwrap(), cloud, t)
}

#[test]
fn initial_colors_render_back_to_the_point_colors() {
    let (g, cloud, _) = init_set(300, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (row, rgb) in g.sh.iter().zip(cloud.colors()) {
        let c = eval_sh(row, random_unit(&mut rng));
        for ch in 0..3 {
            assert!((c[ch] - rgb[ch]).abs() < 1e-12);
        }
    }
    assert!(g.opacities.iter().all(|&o| o == 1.0));
    assert!(g.angles.iter().all(|&a| a == 0.0));
    assert!(g.scales.iter().all(|s| s[0] == s[1] && s[0] > 0.0));
}

#[test]
fn world_round_trip_and_merge() {
    let (a, _, t) = init_set(100, 9);
    let (b, _, _) = init_set(50, 10);
    let (c, _, _) = init_set(30, 11);
    let w = denormalize_gaussians(&a, &t).unwrap();
    assert_eq!(w.space, Space::World);
    assert!(denormalize_gaussians(&w, &t).is_err());
    let back = normalize_gaussians(&w, &t).unwrap();
    for (p, q) in back.positions.iter().zip(&a.positions) {
        for k in 0..3 {
            assert!((p[k] - q[k]).abs() < 1e-12);
        }
    }
    let left = merge_sets(&merge_sets(&a, &b).unwrap(), &c).unwrap();
    let right = merge_sets(&a, &merge_sets(&b, &c).unwrap()).unwrap();
    assert_eq!(left, right);
    assert_eq!(left.len(), 180);
    assert_eq!(left.select(100..150), b);
    assert!(merge_sets(&a, &w).is_err());
}

proptest! {
    #[test]
    fn near_antiparallel_normals_stay_finite(eps in 0.0f64..1e-6, alpha in -7.0f64..7.0) {
        let n = [eps, 0.0, -(1.0 - eps * eps).sqrt()];
        let f = frame(n, alpha);
        prop_assert!(f.t_u.iter().chain(&f.t_v).all(|v| v.is_finite()));
        prop_assert!((f.n[2] + 1.0).abs() < 1e-6);
    }
}
