//! Rendering throughput measurement on a reproducible synthetic scene.

use std::time::Instant;

use crate::camera::Camera;
use crate::error::Result;
use crate::gaussians::{denormalize_gaussians, Gaussian2DSet};
use crate::pipeline::prepare_cloud;
use crate::rasterizer::{render_timed, RenderOptions};
use crate::synthdata::{dataset_cameras, make_scene, sample_points, SceneKind, SceneParams};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub gaussians: usize,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub threads: usize,
    /// Mean per-frame seconds spent projecting, sorting and binning.
    pub prepare_secs: f64,
    /// Mean per-frame seconds spent compositing pixels.
    pub raster_secs: f64,
    pub fps: f64,
}

impl std::fmt::Display for BenchReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "gaussians={} res={}x{} frames={} threads={} prepare_ms={:.3} raster_ms={:.3} fps={:.2}",
            self.gaussians,
            self.width,
            self.height,
            self.frames,
            self.threads,
            self.prepare_secs * 1e3,
            self.raster_secs * 1e3,
            self.fps
        )
    }
}

/// Initialized Gaussians on a sampled sphere surface and `frames` cameras
/// orbiting it.
pub fn bench_scene(gaussians: usize, width: usize, height: usize, frames: usize, seed: u64) -> Result<(Gaussian2DSet<f32>, Vec<Camera>)> {
    let mesh = make_scene(SceneKind::Sphere, &SceneParams::default(), seed)?;
    let cloud = sample_points(&mesh, gaussians, seed)?;
    let prepared = prepare_cloud(&cloud, crate::geometry::DEFAULT_NORMAL_K)?;
    let world = denormalize_gaussians(&prepared.init, &prepared.transform)?.cast();
    Ok((world, dataset_cameras(&mesh, frames.max(1), width, height)?))
}

/// Render every camera once and report mean stage timings.
pub fn run_bench(gaussians: usize, width: usize, height: usize, frames: usize, seed: u64) -> Result<BenchReport> {
    let (g, cams) = bench_scene(gaussians, width, height, frames, seed)?;
    let opts = RenderOptions::default();
    let (mut prepare, mut raster) = (0.0, 0.0);
    let start = Instant::now();
    for cam in &cams {
        let (_, t) = render_timed(&g, cam, &opts)?;
        prepare += t.prepare_secs;
        raster += t.raster_secs;
    }
    let total = start.elapsed().as_secs_f64();
    let n = cams.len() as f64;
    Ok(BenchReport {
        gaussians: g.len(),
        width,
        height,
        frames: cams.len(),
        threads: rayon::current_num_threads(),
        prepare_secs: prepare / n,
        raster_secs: raster / n,
        fps: n / total,
    })
}
