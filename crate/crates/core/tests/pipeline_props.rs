use std::path::Path;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatpatch::checkpoint::{encode_module, ModuleCheckpoint, Precision, RngState};
use splatpatch::gaussians::merge_sets;
use splatpatch::pipeline::*;
use splatpatch::synthdata::{emit_dataset, DatasetConfig, SceneKind};
use splatpatch::{Gaussian2DSet, ModuleParams, NeighborIndex, Space};

fn random_points(rng: &mut impl Rng, n: usize) -> Vec<[f64; 3]> {
    (0..n).map(|_| [rng.random(), rng.random(), rng.random_range(0.0..0.2)]).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn patches_cover_every_point(seed in 0u64..10_000, n in 1usize..400, frac in 0.01f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = random_points(&mut rng, n);
        // A few exact duplicates.
        if n > 3 {
            pts[1] = pts[0];
            pts[2] = pts[0];
        }
        let index = NeighborIndex::from_positions(pts).unwrap();
        let n_p = ((n as f64 * frac) as usize).max(1);
        let patches = cover_with_patches(&index, n_p, &mut rng).unwrap();
        let mut covered = vec![false; n];
        for p in &patches {
            prop_assert_eq!(p.member_indices.len(), n_p);
            prop_assert!(p.member_indices.contains(&p.center_index));
            prop_assert_eq!(p.mask.iter().filter(|&&m| m).count(), n_p);
            for &i in &p.member_indices {
                covered[i] = true;
            }
        }
        prop_assert!(covered.iter().all(|&c| c));
        // Each patch has a center not covered by earlier ones.
        prop_assert!(patches.len() <= n - n_p + 1);
    }
}

#[test]
fn patches_stay_inside_separated_clusters() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut pts = random_points(&mut rng, 200);
    pts.extend(random_points(&mut rng, 200).into_iter().map(|p| [p[0] + 100.0, p[1], p[2]]));
    let index = NeighborIndex::from_positions(pts).unwrap();
    for _ in 0..20 {
        let p = extract_random_patch(&index, 200, &mut rng).unwrap();
        let side = p.center_index / 200;
        assert!(p.member_indices.iter().all(|&i| i / 200 == side));
    }
    assert_eq!(cover_with_patches(&index, 200, &mut rng).unwrap().len(), 2);
}

#[test]
fn large_clouds_need_several_patches() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let index = NeighborIndex::from_positions(random_points(&mut rng, 5000)).unwrap();
    let patches = cover_with_patches(&index, 2048, &mut rng).unwrap();
    assert!(patches.len() >= 3, "{}", patches.len());
    assert!(matches!(
        extract_random_patch(&index, 5001, &mut rng),
        Err(splatpatch::Error::InsufficientPoints { needed: 5001, available: 5000 })
    ));
}

fn tagged_set(rows: usize, tag: f32) -> Gaussian2DSet<f32> {
    let mut g = Gaussian2DSet::empty(Space::World);
    for r in 0..rows {
        g.positions.push([tag, r as f32, 0.0]);
        g.scales.push([1.0, 1.0]);
        g.opacities.push(0.5);
        g.sh.push([0.0; 27]);
        g.normals.push([0.0, 0.0, 1.0]);
        g.angles.push(0.0);
    }
    g
}

#[test]
fn composition_keeps_exact_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, k, n_p) = (50, 3, 12);
    let index = NeighborIndex::from_positions(random_points(&mut rng, n)).unwrap();
    let patch = extract_random_patch(&index, n_p, &mut rng).unwrap();
    let g_e = tagged_set(n * k, 1.0);
    let g_p = tagged_set(n_p * k, 2.0);
    let c = compose_entire_patch(&g_e, &g_p, &patch, k).unwrap();
    assert_eq!(c.len(), (n - n_p) * k + n_p * k);
    let bg: Vec<usize> = (0..n).filter(|j| !patch.mask[*j]).flat_map(|j| j * k..(j + 1) * k).collect();
    assert_eq!(c.select(0..bg.len()), g_e.select(bg.iter().copied()));
    assert_eq!(c.select(bg.len()..c.len()), g_p);
    assert!(compose_entire_patch(&g_e, &tagged_set(n_p * k - 1, 2.0), &patch, k).is_err());
    assert!(compose_entire_patch(&tagged_set(n * k + 1, 1.0), &g_p, &patch, k).is_err());
    let merged = merge_sets(&g_e, &g_p).unwrap();
    assert_eq!(merged.len(), g_e.len() + g_p.len());
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        k: 2,
        patch_size: 160,
        views_per_step: 2,
        lr: 1e-3,
        batch_size: 2,
        max_epochs: 2,
        encoder_widths: vec![8, 16],
        decoder_hidden: vec![16],
        encoder_knn: 6,
        ..TrainConfig::default()
    }
}

fn tiny_scenes(dir: &Path, cfg: &TrainConfig) -> Vec<PreparedScene> {
    let data = DatasetConfig {
        kinds: vec![SceneKind::Cube, SceneKind::TwoSpheres],
        scenes: 2,
        views: 3,
        width: 16,
        height: 16,
        points: 400,
        ..Default::default()
    };
    let manifests = emit_dataset(&data, dir).unwrap();
    load_scenes(&manifests, cfg).unwrap()
}

fn bytes(ck: &ModuleCheckpoint<f32>) -> Vec<u8> {
    encode_module(ck, Precision::F32)
}

#[test]
fn entire_module_stays_frozen_and_caching_changes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let scenes = tiny_scenes(dir.path(), &cfg);
    let entire = train_entire(&scenes, &cfg, &TrainArtifacts::default()).unwrap().checkpoint.params;
    let frozen = ModuleCheckpoint {
        params: entire.clone(),
        rng: RngState::capture(&ChaCha8Rng::seed_from_u64(0)),
        step: 0,
        adam: None,
    };
    let before = bytes(&frozen);
    let cached = train_patch(&scenes, &entire, &TrainConfig { cache_background: true, ..cfg.clone() }, &TrainArtifacts::default()).unwrap();
    let fresh = train_patch(&scenes, &entire, &TrainConfig { cache_background: false, ..cfg.clone() }, &TrainArtifacts::default()).unwrap();
    assert_eq!(bytes(&ModuleCheckpoint { params: entire, ..frozen }), before);
    assert_eq!(bytes(&cached.checkpoint), bytes(&fresh.checkpoint));
    assert_eq!(cached.history.len(), 2);
}

#[test]
fn zero_learning_rate_keeps_the_initial_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { lr: 0.0, ..tiny_config() };
    let scenes = tiny_scenes(dir.path(), &cfg);
    let one = train_entire(&scenes, &TrainConfig { max_epochs: 1, ..cfg.clone() }, &TrainArtifacts::default()).unwrap();
    let three = train_entire(&scenes, &TrainConfig { max_epochs: 3, ..cfg.clone() }, &TrainArtifacts::default()).unwrap();
    assert_eq!(one.checkpoint.params, three.checkpoint.params);
    assert_eq!(three.history.len(), 3);
    assert!(three.history.iter().all(|r| r.loss.is_finite() && !r.skipped));
}

#[test]
fn training_writes_artifacts_and_repeats_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let scenes = tiny_scenes(dir.path(), &cfg);
    let arts = TrainArtifacts {
        checkpoint: Some(dir.path().join("e.ckpt")),
        best: Some(dir.path().join("e.best")),
        loss_csv: Some(dir.path().join("loss.csv")),
    };
    let a = train_entire(&scenes, &cfg, &arts).unwrap();
    let b = train_entire(&scenes, &cfg, &TrainArtifacts::default()).unwrap();
    assert_eq!(bytes(&a.checkpoint), bytes(&b.checkpoint));
    assert_eq!(std::fs::read(dir.path().join("e.ckpt")).unwrap(), bytes(&a.checkpoint));
    assert!(dir.path().join("e.best").is_file());
    let csv = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), LOSS_CSV_HEADER);
    assert_eq!(csv.lines().count(), 1 + a.history.len());
    let other = train_entire(&scenes, &TrainConfig { seed: 9, ..cfg }, &TrainArtifacts::default()).unwrap();
    assert_ne!(bytes(&other.checkpoint), bytes(&a.checkpoint));
}

#[test]
fn patch_covering_whole_cloud_matches_entire_inference() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let scenes = tiny_scenes(dir.path(), &cfg);
    let s = &scenes[0];
    let mut params = ModuleParams::<f32>::init(&cfg.architecture(), 3).unwrap();
    params.randomize_output_layers(&mut ChaCha8Rng::seed_from_u64(4), 0.02);
    let n = s.cloud.world.len();
    let (_, whole) = infer_entire(&params, &s.cloud.world, &s.cameras, &s.options, 16).unwrap();
    let (g, patched) = infer_patchwise(&params, &s.cloud.world, &s.cameras, &s.options, n, true, 16, 0).unwrap();
    assert_eq!(g.len(), cfg.k * n);
    for (a, b) in whole.iter().zip(&patched) {
        let worst = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        assert!(worst < 1e-3, "{worst}");
    }
    // Smaller clouds than a patch fall back to one pass.
    let (g2, _) = infer_patchwise(&params, &s.cloud.world, &s.cameras, &s.options, n + 1, true, 16, 0).unwrap();
    assert_eq!(g2.len(), cfg.k * n);
}

#[test]
fn bad_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let scenes = tiny_scenes(dir.path(), &cfg);
    let other = ModuleParams::<f32>::init(&TrainConfig { k: 3, ..cfg.clone() }.architecture(), 0).unwrap();
    assert!(train_patch(&scenes, &other, &cfg, &TrainArtifacts::default()).is_err());
    assert!(train_entire(&scenes, &TrainConfig { views_per_step: 4, ..cfg.clone() }, &TrainArtifacts::default()).is_err());
    assert!(TrainConfig { batch_size: 0, ..cfg }.validate().is_err());
}
