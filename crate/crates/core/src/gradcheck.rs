//! Central finite-difference checks of the analytic gradients.
//!
//! Each check builds random double-precision problems, perturbs one scalar
//! at a time and compares `(f(x+h) - f(x-h)) / 2h` against the reverse pass.
//! A value passes when `|analytic - fd| <= max(rel_tol * max(|analytic|, |fd|), abs_tol)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::Camera;
use crate::error::Result;
use crate::gaussians::{denormalize_gaussians, rgb_to_sh_dc, Gaussian2DSet, Space, SH_COEFFS};
use crate::geometry::{NeighborIndex, NormalizationTransform};
use crate::image::ImageBuffer;
use crate::metrics;
use crate::network::{backward_with_cache, forward_with_cache, Architecture, ModuleParams, Neighborhoods};
use crate::rasterizer::{render, render_backward, render_decision_signature, GaussianGradients, RenderOptions};
use crate::vec3;

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub trials: usize,
    pub checked: usize,
    /// Stencils skipped because they straddle a non-smooth point.
    pub excluded: usize,
    pub failures: usize,
    pub worst_rel: f64,
    pub worst: String,
    /// Largest analytic magnitude seen; guards against vacuous passes.
    pub max_abs: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }

    fn record(&mut self, analytic: f64, fd: f64, rel_tol: f64, abs_tol: f64, what: impl FnOnce() -> String) {
        self.checked += 1;
        self.max_abs = self.max_abs.max(analytic.abs());
        let err = (analytic - fd).abs();
        let scale = analytic.abs().max(fd.abs());
        let rel = if scale > 0.0 { err / scale } else { 0.0 };
        let ok = err <= (rel_tol * scale).max(abs_tol);
        if !ok {
            self.failures += 1;
        }
        let score = if scale <= 10.0 * abs_tol { 0.0 } else { rel };
        if score > self.worst_rel || (!ok && self.worst.is_empty()) {
            self.worst_rel = score;
            self.worst = format!("{} analytic={analytic:.9e} fd={fd:.9e}", what());
        }
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.trials += other.trials;
        self.checked += other.checked;
        self.excluded += other.excluded;
        self.failures += other.failures;
        self.max_abs = self.max_abs.max(other.max_abs);
        if other.worst_rel > self.worst_rel || self.worst.is_empty() {
            self.worst_rel = other.worst_rel;
            self.worst = other.worst.clone();
        }
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} trials={} checked={} excluded={} failures={} max_abs={:.3e} worst_rel={:.3e} worst=[{}]",
            if self.passed() { "PASS" } else { "FAIL" },
            self.trials,
            self.checked,
            self.excluded,
            self.failures,
            self.max_abs,
            self.worst_rel,
            self.worst
        )
    }
}

pub const RASTER_REL_TOL: f64 = 1e-3;
pub const RASTER_ABS_TOL: f64 = 1e-6;
pub const RASTER_STEP: f64 = 1e-5;

/// A random rasterizer problem: camera, splats, options and an upstream
/// image gradient.
pub struct RasterProblem {
    pub gaussians: Gaussian2DSet<f64>,
    pub camera: Camera,
    pub options: RenderOptions,
    pub d_image: ImageBuffer<f64>,
}

pub fn random_raster_problem(rng: &mut impl Rng, splats: usize, size: usize) -> RasterProblem {
    let dir = loop {
        let v = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let n = vec3::norm(v);
        if n > 0.2 && n < 1.0 {
            break vec3::scale(v, 1.0 / n);
        }
    };
    let eye = vec3::scale(dir, rng.random_range(2.5..3.5));
    let camera = Camera::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], 0.8, size, size).unwrap();
    let mut g = Gaussian2DSet::empty(Space::World);
    for _ in 0..splats {
        g.positions.push([
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
        ]);
        // A share of sub-pixel splats exercises the screen-space low-pass
        // branch, and a share of fully opaque ones the alpha clamp.
        if rng.random_bool(0.2) {
            g.scales.push([rng.random_range(0.01..0.04), rng.random_range(0.01..0.04)]);
        } else {
            g.scales.push([rng.random_range(0.15..0.5), rng.random_range(0.15..0.5)]);
        }
        g.opacities.push(if rng.random_bool(0.15) { 1.0 } else { rng.random_range(0.2..0.95) });
        let mut sh = [0.0; SH_COEFFS];
        let dc = rgb_to_sh_dc([
            rng.random_range(0.25..0.75),
            rng.random_range(0.25..0.75),
            rng.random_range(0.25..0.75),
        ]);
        sh[..3].copy_from_slice(&dc);
        for v in sh.iter_mut().skip(3) {
            *v = rng.random_range(-0.15..0.15);
        }
        g.sh.push(sh);
        let n = loop {
            let v = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let l = vec3::norm(v);
            if l > 0.2 && l < 1.0 {
                break vec3::scale(v, 1.0 / l);
            }
        };
        g.normals.push(n);
        g.angles.push(rng.random_range(0.0..std::f64::consts::TAU));
    }
    let options = RenderOptions {
        background: [
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
        ],
        tile_size: [4, 8, 16][rng.random_range(0..3)],
        ..RenderOptions::default()
    };
    let d_image = ImageBuffer::from_data(size, size, (0..size * size * 3).map(|_| rng.random_range(-1.0..1.0)).collect())
        .unwrap();
    RasterProblem {
        gaussians: g,
        camera,
        options,
        d_image,
    }
}

fn weighted_sum(img: &ImageBuffer<f64>, w: &ImageBuffer<f64>) -> f64 {
    img.data.iter().zip(&w.data).map(|(a, b)| a * b).sum()
}

/// Number of scalar parameters per Gaussian, and a mutable accessor by slot.
pub const PARAMS_PER_GAUSSIAN: usize = 3 + 2 + 1 + SH_COEFFS + 3 + 1;

pub fn param_name(slot: usize) -> String {
    match slot {
        0..=2 => format!("position[{slot}]"),
        3..=4 => format!("scale[{}]", slot - 3),
        5 => "opacity".into(),
        6..=32 => format!("sh[{}]", slot - 6),
        33..=35 => format!("normal[{}]", slot - 33),
        _ => "angle".into(),
    }
}

pub fn param_mut(g: &mut Gaussian2DSet<f64>, i: usize, slot: usize) -> &mut f64 {
    match slot {
        0..=2 => &mut g.positions[i][slot],
        3..=4 => &mut g.scales[i][slot - 3],
        5 => &mut g.opacities[i],
        6..=32 => &mut g.sh[i][slot - 6],
        33..=35 => &mut g.normals[i][slot - 33],
        _ => &mut g.angles[i],
    }
}

fn grad_value(gr: &GaussianGradients<f64>, i: usize, slot: usize) -> f64 {
    match slot {
        0..=2 => gr.positions[i][slot],
        3..=4 => gr.scales[i][slot - 3],
        5 => gr.opacities[i],
        6..=32 => gr.sh[i][slot - 6],
        33..=35 => gr.normals[i][slot - 33],
        _ => gr.angles[i],
    }
}

/// Check every parameter of one problem.
pub fn check_raster_problem(p: &RasterProblem, step: f64) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        trials: 1,
        ..Default::default()
    };
    let analytic = render_backward(&p.gaussians, &p.camera, &p.options, &p.d_image)?;
    let base_sig = render_decision_signature(&p.gaussians, &p.camera, &p.options)?;
    let origin = p.camera.origin();
    for i in 0..p.gaussians.len() {
        // Near-grazing splats have ill-conditioned plane intersections.
        let view = vec3::normalize(vec3::sub(p.gaussians.positions[i], origin));
        if vec3::dot(view, vec3::normalize(p.gaussians.normals[i])).abs() < 1e-3 {
            report.excluded += PARAMS_PER_GAUSSIAN;
            continue;
        }
        for slot in 0..PARAMS_PER_GAUSSIAN {
            let mut plus = p.gaussians.clone();
            *param_mut(&mut plus, i, slot) += step;
            let mut minus = p.gaussians.clone();
            *param_mut(&mut minus, i, slot) -= step;
            let smooth = render_decision_signature(&plus, &p.camera, &p.options)? == base_sig
                && render_decision_signature(&minus, &p.camera, &p.options)? == base_sig;
            if !smooth {
                report.excluded += 1;
                continue;
            }
            let fp = weighted_sum(&render(&plus, &p.camera, &p.options)?, &p.d_image);
            let fm = weighted_sum(&render(&minus, &p.camera, &p.options)?, &p.d_image);
            let fd = (fp - fm) / (2.0 * step);
            report.record(grad_value(&analytic, i, slot), fd, RASTER_REL_TOL, RASTER_ABS_TOL, || {
                format!("gaussian {i} {}", param_name(slot))
            });
        }
    }
    Ok(report)
}

/// `trials` random problems with 1..=10 splats on small images.
pub fn check_rasterizer(trials: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    for t in 0..trials {
        let splats = 1 + t % 10;
        let p = random_raster_problem(&mut rng, splats, 16);
        report.merge(&check_raster_problem(&p, RASTER_STEP)?);
    }
    Ok(report)
}

pub const METRIC_REL_TOL: f64 = 1e-5;
pub const METRIC_ABS_TOL: f64 = 1e-9;

pub fn random_image(rng: &mut impl Rng, w: usize, h: usize) -> ImageBuffer<f64> {
    ImageBuffer::from_data(w, h, (0..w * h * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

/// MSE, SSIM and the combined loss against finite differences on random
/// image pairs; a random subset of pixels is perturbed per trial.
pub fn check_metrics(trials: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    let h = 1e-6;
    for _ in 0..trials {
        report.trials += 1;
        let (w, hh) = (rng.random_range(11..20), rng.random_range(11..20));
        let a = random_image(&mut rng, w, hh);
        let b = random_image(&mut rng, w, hh);
        let (_, dm) = metrics::mse(&a, &b)?;
        let (_, ds) = metrics::ssim(&a, &b)?;
        let combined = metrics::combined_loss(&[a.clone()], &[b.clone()], metrics::DEFAULT_BETA)?;
        for _ in 0..24 {
            let k = rng.random_range(0..a.data.len());
            let mut ap = a.clone();
            ap.data[k] += h;
            let mut am = a.clone();
            am.data[k] -= h;
            let fd_m = (metrics::mse(&ap, &b)?.0 - metrics::mse(&am, &b)?.0) / (2.0 * h);
            report.record(dm.data[k], fd_m, METRIC_REL_TOL, METRIC_ABS_TOL, || format!("mse value {k}"));
            let fd_s = (metrics::ssim(&ap, &b)?.0 - metrics::ssim(&am, &b)?.0) / (2.0 * h);
            report.record(ds.data[k], fd_s, METRIC_REL_TOL, METRIC_ABS_TOL, || format!("ssim value {k}"));
            let lp = metrics::combined_loss(&[ap], &[b.clone()], metrics::DEFAULT_BETA)?.total;
            let lm = metrics::combined_loss(&[am], &[b.clone()], metrics::DEFAULT_BETA)?.total;
            report.record(
                combined.views[0].d_image.data[k],
                (lp - lm) / (2.0 * h),
                METRIC_REL_TOL,
                METRIC_ABS_TOL,
                || format!("combined value {k}"),
            );
        }
    }
    Ok(report)
}

pub const NETWORK_TINY_REL_TOL: f64 = 1e-4;
pub const NETWORK_REL_TOL: f64 = 1e-3;
pub const NETWORK_ABS_TOL: f64 = 1e-8;
pub const NETWORK_STEP: f64 = 1e-6;

fn random_unit(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let l = vec3::norm(v);
        if l > 0.2 && l < 1.0 {
            return vec3::scale(v, 1.0 / l);
        }
    }
}

/// Random normalized initial set with `n` Gaussians in the unit cube.
pub fn random_init_set(rng: &mut impl Rng, n: usize, scale: std::ops::Range<f64>) -> Gaussian2DSet<f64> {
    let mut g = Gaussian2DSet::empty(Space::Normalized);
    for _ in 0..n {
        g.positions.push([
            rng.random_range(-0.8..0.8),
            rng.random_range(-0.8..0.8),
            rng.random_range(-0.8..0.8),
        ]);
        g.scales.push([rng.random_range(scale.clone()), rng.random_range(scale.clone())]);
        g.opacities.push(1.0);
        let mut sh = [0.0; SH_COEFFS];
        sh[..3].copy_from_slice(&rgb_to_sh_dc([
            rng.random_range(0.1..0.9),
            rng.random_range(0.1..0.9),
            rng.random_range(0.1..0.9),
        ]));
        g.sh.push(sh);
        g.normals.push(random_unit(rng));
        g.angles.push(rng.random_range(0.0..std::f64::consts::TAU));
    }
    g
}

/// Perturb parameter `(tensor, element)` by `delta`.
fn nudge(m: &ModuleParams<f64>, tensor: usize, element: usize, delta: f64) -> ModuleParams<f64> {
    let mut out = m.clone();
    out.tensors_mut()[tensor][element] += delta;
    out
}

/// Every weight of a tiny module (widths 8, N=4, K=2) against finite
/// differences of a random linear functional of all predicted fields.
pub fn check_network_tiny(trials: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    let arch = Architecture {
        k: 2,
        encoder_widths: vec![8, 8],
        decoder_hidden: vec![8],
        encoder_knn: 4,
    };
    for _ in 0..trials {
        report.trials += 1;
        let init = random_init_set(&mut rng, 4, 0.05..0.2);
        let index = NeighborIndex::from_positions(init.positions.clone())?;
        let nb = Neighborhoods::from_index(&index, arch.encoder_knn)?;
        let mut m = ModuleParams::<f64>::init(&arch, rng.random())?;
        m.randomize_output_layers(&mut rng, 0.3);
        let n_out = init.len() * arch.k;
        let mut w = GaussianGradients::<f64>::zeros(n_out);
        for i in 0..n_out {
            w.positions[i] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            w.scales[i] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            w.opacities[i] = rng.random_range(-1.0..1.0);
            w.sh[i] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            w.normals[i] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            w.angles[i] = rng.random_range(-1.0..1.0);
        }
        let functional = |g: &Gaussian2DSet<f64>| -> f64 {
            let mut s = 0.0;
            for i in 0..g.len() {
                s += vec3::dot(g.positions[i], w.positions[i])
                    + g.scales[i][0] * w.scales[i][0]
                    + g.scales[i][1] * w.scales[i][1]
                    + g.opacities[i] * w.opacities[i]
                    + g.sh[i].iter().zip(&w.sh[i]).map(|(a, b)| a * b).sum::<f64>()
                    + vec3::dot(g.normals[i], w.normals[i])
                    + g.angles[i] * w.angles[i];
            }
            s
        };
        let (pred, cache) = forward_with_cache(&m, &init, &nb)?;
        let base_sig = cache.decision_signature();
        let mut pg = m.zeros_like();
        backward_with_cache(&m, &init, &pred, &cache, &w, &mut pg)?;
        let names = m.tensor_names();
        let grads: Vec<Vec<f64>> = pg.tensors().iter().map(|t| t.to_vec()).collect();
        for (ti, g) in grads.iter().enumerate() {
            for (ei, &analytic) in g.iter().enumerate() {
                let (pp, cp) = forward_with_cache(&nudge(&m, ti, ei, NETWORK_STEP), &init, &nb)?;
                let (pm, cm) = forward_with_cache(&nudge(&m, ti, ei, -NETWORK_STEP), &init, &nb)?;
                if cp.decision_signature() != base_sig || cm.decision_signature() != base_sig {
                    report.excluded += 1;
                    continue;
                }
                let fd = (functional(&pp) - functional(&pm)) / (2.0 * NETWORK_STEP);
                report.record(analytic, fd, NETWORK_TINY_REL_TOL, NETWORK_ABS_TOL, || {
                    format!("{}[{ei}]", names[ti])
                });
            }
        }
    }
    Ok(report)
}

/// A micro end-to-end problem: module, normalized initial set, world
/// transform, camera and target image.
pub struct NetworkProblem {
    pub module: ModuleParams<f64>,
    pub init: Gaussian2DSet<f64>,
    pub transform: NormalizationTransform,
    pub camera: Camera,
    pub options: RenderOptions,
    pub target: ImageBuffer<f64>,
}

pub fn random_network_problem(rng: &mut impl Rng, points: usize, size: usize) -> Result<NetworkProblem> {
    let arch = Architecture {
        k: 2,
        encoder_widths: vec![16, 16],
        decoder_hidden: vec![16, 16],
        encoder_knn: 16,
    };
    let mut module = ModuleParams::<f64>::init(&arch, rng.random())?;
    module.randomize_output_layers(rng, 0.05);
    let init = random_init_set(rng, points, 0.1..0.3);
    let transform = NormalizationTransform {
        center: [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ],
        scale: rng.random_range(0.5..2.0),
    };
    let eye = vec3::add(transform.center, vec3::scale(random_unit(rng), 3.5 * transform.scale));
    let camera = Camera::look_at(eye, transform.center, [0.0, 0.0, 1.0], 0.8, size, size)?;
    let target = random_image(rng, size, size);
    Ok(NetworkProblem {
        module,
        init,
        transform,
        camera,
        options: RenderOptions::with_background([rng.random(), rng.random(), rng.random()]),
        target,
    })
}

fn end_to_end_loss(p: &NetworkProblem, m: &ModuleParams<f64>, nb: &Neighborhoods) -> Result<(f64, u64)> {
    let (pred, cache) = forward_with_cache(m, &p.init, nb)?;
    let world = denormalize_gaussians(&pred, &p.transform)?;
    let img = render(&world, &p.camera, &p.options)?;
    let sig = cache.decision_signature() ^ render_decision_signature(&world, &p.camera, &p.options)?.rotate_left(1);
    let loss = metrics::combined_loss(&[img], &[p.target.clone()], metrics::DEFAULT_BETA)?;
    Ok((loss.total, sig))
}

/// Every weight of the micro module against finite differences of the full
/// predict, denormalize, render, loss chain.
pub fn check_network_problem(p: &NetworkProblem) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        trials: 1,
        ..Default::default()
    };
    let m = &p.module;
    let index = NeighborIndex::from_positions(p.init.positions.clone())?;
    let nb = Neighborhoods::from_index(&index, m.arch.encoder_knn)?;
    let (pred, cache) = forward_with_cache(m, &p.init, &nb)?;
    let world = denormalize_gaussians(&pred, &p.transform)?;
    let img = render(&world, &p.camera, &p.options)?;
    let loss = metrics::combined_loss(&[img], &[p.target.clone()], metrics::DEFAULT_BETA)?;
    let mut gg = render_backward(&world, &p.camera, &p.options, &loss.views[0].d_image)?;
    gg.to_normalized(p.transform.scale);
    let mut pg = m.zeros_like();
    backward_with_cache(m, &p.init, &pred, &cache, &gg, &mut pg)?;
    let (_, base_sig) = end_to_end_loss(p, m, &nb)?;
    let names = m.tensor_names();
    let grads: Vec<Vec<f64>> = pg.tensors().iter().map(|t| t.to_vec()).collect();
    for (ti, g) in grads.iter().enumerate() {
        for (ei, &analytic) in g.iter().enumerate() {
            let (lp, sp) = end_to_end_loss(p, &nudge(m, ti, ei, NETWORK_STEP), &nb)?;
            let (lm, sm) = end_to_end_loss(p, &nudge(m, ti, ei, -NETWORK_STEP), &nb)?;
            if sp != base_sig || sm != base_sig {
                report.excluded += 1;
                continue;
            }
            let fd = (lp - lm) / (2.0 * NETWORK_STEP);
            report.record(analytic, fd, NETWORK_REL_TOL, NETWORK_ABS_TOL, || {
                format!("{}[{ei}]", names[ti])
            });
        }
    }
    Ok(report)
}

/// Micro end-to-end configuration: 16 points, K=2, widths 16, 16x16 image.
pub fn check_network(trials: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    for _ in 0..trials {
        let p = random_network_problem(&mut rng, 16, 16)?;
        report.merge(&check_network_problem(&p)?);
    }
    Ok(report)
}
