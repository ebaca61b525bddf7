//! Entire-patch training and inference.
//!
//! The entire module `N_e` predicts Gaussians for a whole cloud. The patch
//! module `N_p` predicts Gaussians for one k-NN patch; during its training
//! the frozen entire module's prediction for the points outside the patch is
//! composited in as background so complete views can supervise the patch.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::Camera;
use crate::checkpoint::{save_checkpoint, ModuleCheckpoint, RngState};
use crate::error::{Error, Result};
use crate::gaussians::{denormalize_gaussians, initialize_gaussians, merge_sets, normalize_gaussians, Gaussian2DSet};
use crate::geometry::{
    build_index, estimate_normals, min_neighbor_distance, normalize_cloud, NeighborIndex, NormalizationTransform,
    PointCloud, DEFAULT_NORMAL_K,
};
use crate::image::ImageBuffer;
use crate::manifest::SceneManifest;
use crate::metrics;
use crate::network::{
    adam_step, backward_with_cache, forward_with_cache, AdamState, Architecture, ModuleParams, Neighborhoods,
};
use crate::rasterizer::{render, render_backward, GaussianGradients, RenderOptions};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Split count.
    pub k: usize,
    /// Points per patch.
    pub patch_size: usize,
    /// MSE weight in the combined loss.
    pub beta: f64,
    /// Views rendered per scene per step.
    pub views_per_step: usize,
    pub lr: f64,
    /// Scenes per optimizer step.
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Expected image resolution; `None` accepts whatever the manifests say.
    pub resolution: Option<(usize, usize)>,
    pub seed: u64,
    /// Overrides the manifest background when set.
    pub background: Option<[f64; 3]>,
    pub encoder_widths: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub encoder_knn: usize,
    /// Neighbourhood size for normal estimation when the cloud has none.
    pub normal_k: usize,
    /// Normalize each patch by its own bounding box (otherwise by the whole cloud's).
    pub patch_own_normalization: bool,
    /// Reuse the frozen entire module's background per scene instead of
    /// recomputing it every step. Both give identical results.
    pub cache_background: bool,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    /// Stop at the first epoch boundary after this much wall time.
    pub time_budget_secs: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let arch = Architecture::full(4);
        Self {
            k: 4,
            patch_size: 2048,
            beta: 0.8,
            views_per_step: 8,
            lr: 1e-4,
            batch_size: 8,
            max_epochs: 480,
            resolution: None,
            seed: 0,
            background: None,
            encoder_widths: arch.encoder_widths,
            decoder_hidden: arch.decoder_hidden,
            encoder_knn: arch.encoder_knn,
            normal_k: DEFAULT_NORMAL_K,
            patch_own_normalization: true,
            cache_background: false,
            max_steps: None,
            time_budget_secs: None,
        }
    }
}

impl TrainConfig {
    /// Small-network settings for single-machine CPU runs: narrower encoder
    /// and decoder stages, larger learning rate, one scene per step.
    pub fn desk() -> Self {
        Self {
            patch_size: 1024,
            lr: 5e-4,
            batch_size: 1,
            max_epochs: 75,
            encoder_widths: vec![32, 64, 128, 256],
            decoder_hidden: vec![128, 64],
            cache_background: true,
            ..Self::default()
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            k: self.k,
            encoder_widths: self.encoder_widths.clone(),
            decoder_hidden: self.decoder_hidden.clone(),
            encoder_knn: self.encoder_knn,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture().validate()?;
        let positive = [
            (self.patch_size, "patch_size"),
            (self.views_per_step, "views_per_step"),
            (self.batch_size, "batch_size"),
            (self.max_epochs, "max_epochs"),
        ];
        for (v, name) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::invalid("beta must lie in [0, 1]"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid("lr must be finite and non-negative"));
        }
        if self.normal_k < 3 {
            return Err(Error::invalid("normal_k must be at least 3"));
        }
        Ok(())
    }

    /// `key = value` lines for every field.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        let mut s = String::new();
        let _ = writeln!(s, "k = {}", self.k);
        let _ = writeln!(s, "patch_size = {}", self.patch_size);
        let _ = writeln!(s, "beta = {}", self.beta);
        let _ = writeln!(s, "views_per_step = {}", self.views_per_step);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "max_epochs = {}", self.max_epochs);
        let _ = writeln!(s, "resolution = {}", opt(self.resolution.map(|(w, h)| format!("{w}x{h}"))));
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(
            s,
            "background = {}",
            opt(self.background.map(|b| format!("{},{},{}", b[0], b[1], b[2])))
        );
        let _ = writeln!(s, "encoder_widths = {}", list(&self.encoder_widths));
        let _ = writeln!(s, "decoder_hidden = {}", list(&self.decoder_hidden));
        let _ = writeln!(s, "encoder_knn = {}", self.encoder_knn);
        let _ = writeln!(s, "normal_k = {}", self.normal_k);
        let _ = writeln!(s, "patch_own_normalization = {}", self.patch_own_normalization);
        let _ = writeln!(s, "cache_background = {}", self.cache_background);
        let _ = writeln!(s, "max_steps = {}", opt(self.max_steps.map(|v| v.to_string())));
        let _ = writeln!(s, "time_budget_secs = {}", opt(self.time_budget_secs.map(|v| v.to_string())));
        s
    }

    /// Apply `key = value` lines on top of `base`. `#` starts a comment;
    /// `preset = desk` switches the base to [`TrainConfig::desk`] and must
    /// come first.
    pub fn parse(path: &Path, text: &str, base: TrainConfig) -> Result<Self> {
        let mut cfg = base;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let perr = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| perr(format!("expected `key = value`, found `{line}`")))?;
            cfg.set(key, value).map_err(|e| perr(e.to_string()))?;
        }
        cfg.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(path, &text, TrainConfig::default())
    }

    /// Set one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
            v.parse().map_err(|_| Error::invalid(format!("bad value `{v}` for {key}")))
        }
        fn list(key: &str, v: &str) -> Result<Vec<usize>> {
            v.split(',').map(|x| num(key, x.trim())).collect()
        }
        let none = value.eq_ignore_ascii_case("none");
        match key {
            "preset" => match value {
                "desk" => *self = TrainConfig::desk(),
                "paper" | "default" => *self = TrainConfig::default(),
                _ => return Err(Error::invalid(format!("unknown preset `{value}`"))),
            },
            "k" => self.k = num(key, value)?,
            "patch_size" => self.patch_size = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "views_per_step" => self.views_per_step = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "max_epochs" => self.max_epochs = num(key, value)?,
            "resolution" => {
                self.resolution = if none {
                    None
                } else {
                    let (w, h) = value
                        .split_once('x')
                        .ok_or_else(|| Error::invalid("resolution must look like 64x64"))?;
                    Some((num(key, w)?, num(key, h)?))
                }
            }
            "seed" => self.seed = num(key, value)?,
            "background" => {
                self.background = if none {
                    None
                } else {
                    let v: Vec<f64> = value.split(',').map(|x| num(key, x.trim())).collect::<Result<_>>()?;
                    if v.len() != 3 {
                        return Err(Error::invalid("background needs three values"));
                    }
                    Some([v[0], v[1], v[2]])
                }
            }
            "encoder_widths" => self.encoder_widths = list(key, value)?,
            "decoder_hidden" => self.decoder_hidden = if value.is_empty() { Vec::new() } else { list(key, value)? },
            "encoder_knn" => self.encoder_knn = num(key, value)?,
            "normal_k" => self.normal_k = num(key, value)?,
            "patch_own_normalization" => self.patch_own_normalization = num(key, value)?,
            "cache_background" => self.cache_background = num(key, value)?,
            "max_steps" => self.max_steps = if none { None } else { Some(num(key, value)?) },
            "time_budget_secs" => self.time_budget_secs = if none { None } else { Some(num(key, value)?) },
            _ => return Err(Error::invalid(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }
}

/// A cloud in normalized space with normals, ready for prediction.
#[derive(Debug, Clone)]
pub struct PreparedCloud {
    /// Original coordinates, with normals.
    pub world: PointCloud,
    pub transform: NormalizationTransform,
    /// Index over the original coordinates.
    pub world_index: NeighborIndex,
    pub init: Gaussian2DSet<f64>,
    /// Initial set in world coordinates.
    pub init_world: Gaussian2DSet<f64>,
}

/// Normalize, estimate normals when missing, and initialize Gaussians.
pub fn prepare_cloud(cloud: &PointCloud, normal_k: usize) -> Result<PreparedCloud> {
    let (normalized, transform) = normalize_cloud(cloud)?;
    let index = build_index(&normalized)?;
    let normalized = match normalized.normals() {
        Some(_) => normalized,
        None => {
            let k = normal_k.min(normalized.len());
            let normals = estimate_normals(&normalized, &index, k)?;
            normalized.with_normals(normals)?
        }
    };
    let dists = min_neighbor_distance(&normalized, &index)?;
    let init = initialize_gaussians::<f64>(&normalized, &dists)?;
    let init_world = denormalize_gaussians(&init, &transform)?;
    let world = cloud.clone().without_normals().with_normals(normalized.normals().unwrap().to_vec())?;
    let world_index = build_index(&world)?;
    Ok(PreparedCloud {
        world,
        transform,
        world_index,
        init,
        init_world,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Patch {
    pub center_index: usize,
    /// Exactly `N_p` point ids, nearest first.
    pub member_indices: Vec<usize>,
    /// Membership over the whole cloud.
    pub mask: Vec<bool>,
}

/// The `n_p` nearest points to `center` (inclusive).
fn patch_around(index: &NeighborIndex, center: usize, n_p: usize) -> Result<Patch> {
    let n = index.len();
    let (mut ids, _) = index.k_nearest(index.points()[center], n_p)?;
    // Exact duplicates of the center can crowd it out of its own patch.
    if !ids.contains(&center) {
        *ids.last_mut().unwrap() = center;
    }
    let mut mask = vec![false; n];
    for &i in &ids {
        mask[i] = true;
    }
    Ok(Patch {
        center_index: center,
        member_indices: ids,
        mask,
    })
}

pub fn extract_random_patch(index: &NeighborIndex, n_p: usize, rng: &mut impl Rng) -> Result<Patch> {
    let n = index.len();
    if n < n_p || n_p == 0 {
        return Err(Error::InsufficientPoints {
            needed: n_p.max(1),
            available: n,
        });
    }
    let center = rng.random_range(0..n);
    patch_around(index, center, n_p)
}

/// Random-center patches until every point is covered; each new center is
/// drawn from the points not yet covered.
pub fn cover_with_patches(index: &NeighborIndex, n_p: usize, rng: &mut impl Rng) -> Result<Vec<Patch>> {
    let n = index.len();
    if n < n_p || n_p == 0 {
        return Err(Error::InsufficientPoints {
            needed: n_p.max(1),
            available: n,
        });
    }
    let mut covered = vec![false; n];
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut patches = Vec::new();
    while !remaining.is_empty() {
        let center = remaining[rng.random_range(0..remaining.len())];
        let patch = patch_around(index, center, n_p)?;
        for &i in &patch.member_indices {
            covered[i] = true;
        }
        remaining.retain(|&i| !covered[i]);
        patches.push(patch);
    }
    Ok(patches)
}

/// Background rows of `g_e` (sources outside the patch) followed by all of `g_p`.
pub fn compose_entire_patch<T: crate::Real>(
    g_e: &Gaussian2DSet<T>,
    g_p: &Gaussian2DSet<T>,
    patch: &Patch,
    k: usize,
) -> Result<Gaussian2DSet<T>> {
    let n = patch.mask.len();
    if g_e.len() != k * n {
        return Err(Error::InvalidState(format!(
            "entire prediction has {} rows, expected K*N = {}",
            g_e.len(),
            k * n
        )));
    }
    if g_p.len() != k * patch.member_indices.len() {
        return Err(Error::InvalidState(format!(
            "patch prediction has {} rows, expected K*N_p = {}",
            g_p.len(),
            k * patch.member_indices.len()
        )));
    }
    if g_e.space != g_p.space {
        return Err(Error::InvalidState("entire and patch sets are in different spaces".into()));
    }
    let rows = (0..n).filter(|&j| !patch.mask[j]).flat_map(|j| j * k..(j + 1) * k);
    let mut out = g_e.select(rows);
    out.extend_from(g_p);
    Ok(out)
}

/// Normalized inputs of one patch: initial set, transform and neighbourhoods.
pub struct PatchInputs<T> {
    pub init: Gaussian2DSet<T>,
    pub transform: NormalizationTransform,
    pub neighborhoods: Neighborhoods,
}

pub fn patch_inputs<T: crate::Real>(
    prepared: &PreparedCloud,
    patch: &Patch,
    own_normalization: bool,
    encoder_knn: usize,
) -> Result<PatchInputs<T>> {
    let world = prepared.init_world.select(patch.member_indices.iter().copied());
    let transform = if own_normalization {
        normalize_cloud(&prepared.world.select(&patch.member_indices)?)?.1
    } else {
        prepared.transform
    };
    let init = normalize_gaussians(&world, &transform)?;
    let index = NeighborIndex::from_positions(init.positions.clone())?;
    let neighborhoods = Neighborhoods::from_index(&index, encoder_knn)?;
    Ok(PatchInputs {
        init: init.cast(),
        transform,
        neighborhoods,
    })
}

/// One training scene with everything that does not change between steps.
pub struct PreparedScene {
    pub name: String,
    pub cloud: PreparedCloud,
    pub init: Gaussian2DSet<f32>,
    pub neighborhoods: Neighborhoods,
    pub cameras: Vec<Camera>,
    pub images: Vec<ImageBuffer<f32>>,
    pub options: RenderOptions,
}

pub fn prepare_scene(manifest: &SceneManifest, cfg: &TrainConfig) -> Result<PreparedScene> {
    if let Some((w, h)) = cfg.resolution {
        if (w, h) != (manifest.width, manifest.height) {
            return Err(Error::format(
                &manifest.path,
                format!(
                    "resolution {}x{} differs from the configured {w}x{h}",
                    manifest.width, manifest.height
                ),
            ));
        }
    }
    let cloud = prepare_cloud(&manifest.load_cloud()?, cfg.normal_k)?;
    let index = NeighborIndex::from_positions(cloud.init.positions.clone())?;
    let neighborhoods = Neighborhoods::from_index(&index, cfg.encoder_knn)?;
    Ok(PreparedScene {
        name: manifest.path.display().to_string(),
        init: cloud.init.cast(),
        neighborhoods,
        cameras: manifest.cameras(),
        images: manifest.load_images()?,
        options: RenderOptions::with_background(cfg.background.unwrap_or(manifest.background)),
        cloud,
    })
}

pub fn load_scenes(manifests: &[PathBuf], cfg: &TrainConfig) -> Result<Vec<PreparedScene>> {
    if manifests.is_empty() {
        return Err(Error::EmptyInput("no scene manifests"));
    }
    manifests
        .iter()
        .map(|p| {
            let m = SceneManifest::load(p)?;
            prepare_scene(&m, cfg).inspect_err(|e| log::error!("scene {}: {e}", p.display()))
        })
        .collect()
}

/// Loss terms of one step, averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub mse: f64,
    pub ssim: f64,
    /// Rejected because of a non-finite loss or gradient.
    pub skipped: bool,
}

pub const LOSS_CSV_HEADER: &str = "epoch,step,loss,mse,ssim,psnr,skipped";

impl StepRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.8},{:.8},{:.8},{:.4},{}",
            self.epoch,
            self.step,
            self.loss,
            self.mse,
            self.ssim,
            metrics::psnr_from_mse(self.mse),
            self.skipped as u8
        )
    }
}

/// Where a training run writes its artifacts. Every field is optional.
#[derive(Debug, Clone, Default)]
pub struct TrainArtifacts {
    /// Overwritten at the end of every epoch.
    pub checkpoint: Option<PathBuf>,
    /// Snapshot of the lowest epoch-mean loss seen.
    pub best: Option<PathBuf>,
    pub loss_csv: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: ModuleCheckpoint<f32>,
    pub history: Vec<StepRecord>,
    pub epochs: usize,
}

/// Render the chosen views, score them and pull the image gradients back to
/// per-Gaussian gradients, summed in view order.
fn render_loss_grads(
    world: &Gaussian2DSet<f32>,
    scene: &PreparedScene,
    views: &[usize],
    beta: f64,
) -> Result<(metrics::CombinedLoss<f32>, GaussianGradients<f32>)> {
    let preds = views
        .iter()
        .map(|&v| render(world, &scene.cameras[v], &scene.options))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<ImageBuffer<f32>> = views.iter().map(|&v| scene.images[v].clone()).collect();
    let loss = metrics::combined_loss(&preds, &gts, beta)?;
    let mut grads = GaussianGradients::zeros(world.len());
    for (lv, &v) in loss.views.iter().zip(views) {
        grads.add_assign(&render_backward(world, &scene.cameras[v], &scene.options, &lv.d_image)?);
    }
    Ok((loss, grads))
}

fn scale_params(p: &mut ModuleParams<f32>, factor: f32) {
    for t in p.tensors_mut() {
        t.iter_mut().for_each(|v| *v *= factor);
    }
}

fn choose_views(rng: &mut ChaCha8Rng, scene: &PreparedScene, n_c: usize) -> Result<Vec<usize>> {
    if scene.cameras.len() < n_c {
        return Err(Error::Format {
            path: PathBuf::from(&scene.name),
            msg: format!("{} views, but {n_c} are needed per step", scene.cameras.len()),
        });
    }
    Ok(sample(rng, scene.cameras.len(), n_c).into_vec())
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    params: ModuleParams<f32>,
    adam: AdamState<f32>,
    rng: ChaCha8Rng,
    step: u64,
    history: Vec<StepRecord>,
    artifacts: &'a TrainArtifacts,
    csv: Option<std::fs::File>,
}

impl<'a> Trainer<'a> {
    fn new(cfg: &'a TrainConfig, artifacts: &'a TrainArtifacts, seed_offset: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(seed_offset));
        let params = ModuleParams::<f32>::init(&cfg.architecture(), rng.random())?;
        let adam = AdamState::new(&params, cfg.lr);
        let csv = match &artifacts.loss_csv {
            Some(p) => {
                let mut f = std::fs::File::create(p).map_err(|e| Error::io(p, e))?;
                writeln!(f, "{LOSS_CSV_HEADER}").map_err(|e| Error::io(p, e))?;
                Some(f)
            }
            None => None,
        };
        Ok(Self {
            cfg,
            params,
            adam,
            rng,
            step: 0,
            history: Vec::new(),
            artifacts,
            csv,
        })
    }

    fn checkpoint(&self) -> ModuleCheckpoint<f32> {
        ModuleCheckpoint {
            params: self.params.clone(),
            rng: RngState::capture(&self.rng),
            step: self.step,
            adam: Some(self.adam.clone()),
        }
    }

    /// Epoch loop; `item` computes one scene's loss and accumulates its
    /// parameter gradients.
    fn run(
        mut self,
        scenes: &[PreparedScene],
        mut item: impl FnMut(&ModuleParams<f32>, &PreparedScene, &mut ChaCha8Rng, &mut ModuleParams<f32>) -> Result<(f64, f64, f64)>,
    ) -> Result<TrainOutcome> {
        let started = Instant::now();
        let mut best = f64::INFINITY;
        let mut epochs = 0;
        'epochs: for epoch in 0..self.cfg.max_epochs {
            let mut order: Vec<usize> = (0..scenes.len()).collect();
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut self.rng);
            let mut epoch_loss = 0.0;
            let mut epoch_steps = 0;
            for batch in order.chunks(self.cfg.batch_size) {
                if self.cfg.max_steps.is_some_and(|m| self.step as usize >= m) {
                    break 'epochs;
                }
                let mut grads = self.params.zeros_like();
                let (mut loss, mut mse, mut ssim) = (0.0, 0.0, 0.0);
                for &s in batch {
                    let (l, m, q) = item(&self.params, &scenes[s], &mut self.rng, &mut grads)?;
                    loss += l;
                    mse += m;
                    ssim += q;
                }
                let nb = batch.len() as f64;
                scale_params(&mut grads, (1.0 / nb) as f32);
                let finite = loss.is_finite();
                let skipped = !finite || {
                    match adam_step(&mut self.adam, &mut self.params, &grads) {
                        Ok(()) => false,
                        Err(Error::NonFiniteGradient(name)) => {
                            log::warn!("step {}: non-finite gradient in {name}; step skipped", self.step);
                            true
                        }
                        Err(e) => return Err(e),
                    }
                };
                if !finite {
                    log::warn!("step {}: non-finite loss; step skipped", self.step);
                }
                let rec = StepRecord {
                    epoch,
                    step: self.step as usize,
                    loss: loss / nb,
                    mse: mse / nb,
                    ssim: ssim / nb,
                    skipped,
                };
                if let (Some(f), Some(p)) = (&mut self.csv, &self.artifacts.loss_csv) {
                    writeln!(f, "{}", rec.csv_row()).map_err(|e| Error::io(p, e))?;
                }
                self.history.push(rec);
                self.step += 1;
                if !skipped {
                    epoch_loss += rec.loss;
                    epoch_steps += 1;
                }
            }
            epochs = epoch + 1;
            let mean = epoch_loss / epoch_steps.max(1) as f64;
            log::info!("epoch {epoch}: mean loss {mean:.6} ({} steps)", self.step);
            if let Some(p) = &self.artifacts.checkpoint {
                save_checkpoint(&self.checkpoint(), p)?;
            }
            if epoch_steps > 0 && mean < best {
                best = mean;
                if let Some(p) = &self.artifacts.best {
                    save_checkpoint(&self.checkpoint(), p)?;
                }
            }
            if self
                .cfg
                .time_budget_secs
                .is_some_and(|b| started.elapsed().as_secs_f64() >= b)
            {
                log::info!("time budget reached after epoch {epoch}");
                break;
            }
        }
        Ok(TrainOutcome {
            checkpoint: self.checkpoint(),
            history: self.history,
            epochs,
        })
    }
}

/// Loss of one scene for the entire module; accumulates gradients into `grads`.
pub fn entire_step(
    params: &ModuleParams<f32>,
    scene: &PreparedScene,
    views: &[usize],
    beta: f64,
    grads: &mut ModuleParams<f32>,
) -> Result<(f64, f64, f64)> {
    let (pred, cache) = forward_with_cache(params, &scene.init, &scene.neighborhoods)?;
    let world = denormalize_gaussians(&pred, &scene.cloud.transform)?;
    let (loss, mut gg) = render_loss_grads(&world, scene, views, beta)?;
    gg.to_normalized(scene.cloud.transform.scale);
    backward_with_cache(params, &scene.init, &pred, &cache, &gg, grads)?;
    Ok(loss_terms(&loss))
}

fn loss_terms(loss: &metrics::CombinedLoss<f32>) -> (f64, f64, f64) {
    let n = loss.views.len() as f64;
    (
        loss.total,
        loss.views.iter().map(|v| v.mse).sum::<f64>() / n,
        loss.views.iter().map(|v| v.ssim).sum::<f64>() / n,
    )
}

pub fn train_entire(scenes: &[PreparedScene], cfg: &TrainConfig, artifacts: &TrainArtifacts) -> Result<TrainOutcome> {
    let trainer = Trainer::new(cfg, artifacts, 0)?;
    trainer.run(scenes, |params, scene, rng, grads| {
        let views = choose_views(rng, scene, cfg.views_per_step)?;
        entire_step(params, scene, &views, cfg.beta, grads)
    })
}

/// World-space prediction of a module for a whole prepared scene.
pub fn predict_entire_world(params: &ModuleParams<f32>, scene: &PreparedScene) -> Result<Gaussian2DSet<f32>> {
    let (pred, _) = forward_with_cache(params, &scene.init, &scene.neighborhoods)?;
    denormalize_gaussians(&pred, &scene.cloud.transform)
}

/// Loss of one patch step: the frozen background `g_e` (world space) is
/// composited with the patch module's prediction. Gradients go only into
/// `grads` (the patch module's accumulator).
#[allow(clippy::too_many_arguments)]
pub fn patch_step(
    patch_params: &ModuleParams<f32>,
    scene: &PreparedScene,
    g_e: &Gaussian2DSet<f32>,
    patch: &Patch,
    views: &[usize],
    cfg: &TrainConfig,
    grads: &mut ModuleParams<f32>,
) -> Result<(f64, f64, f64)> {
    let inputs = patch_inputs::<f32>(&scene.cloud, patch, cfg.patch_own_normalization, cfg.encoder_knn)?;
    let (pred, cache) = forward_with_cache(patch_params, &inputs.init, &inputs.neighborhoods)?;
    let p_world = denormalize_gaussians(&pred, &inputs.transform)?;
    let composed = compose_entire_patch(g_e, &p_world, patch, cfg.k)?;
    let (loss, gg) = render_loss_grads(&composed, scene, views, cfg.beta)?;
    let bg = composed.len() - p_world.len();
    let mut gp = gg.select(bg..composed.len());
    gp.to_normalized(inputs.transform.scale);
    backward_with_cache(patch_params, &inputs.init, &pred, &cache, &gp, grads)?;
    Ok(loss_terms(&loss))
}

/// Train the patch module against the frozen `entire` module.
pub fn train_patch(
    scenes: &[PreparedScene],
    entire: &ModuleParams<f32>,
    cfg: &TrainConfig,
    artifacts: &TrainArtifacts,
) -> Result<TrainOutcome> {
    if entire.arch != cfg.architecture() {
        return Err(Error::invalid(
            "entire and patch modules must share the architecture hyperparameters",
        ));
    }
    let trainer = Trainer::new(cfg, artifacts, 1)?;
    let mut cache: HashMap<usize, Gaussian2DSet<f32>> = HashMap::new();
    let index_of = |scene: &PreparedScene| scenes.iter().position(|s| std::ptr::eq(s, scene)).unwrap();
    trainer.run(scenes, |params, scene, rng, grads| {
        let g_e = if cfg.cache_background {
            let i = index_of(scene);
            if !cache.contains_key(&i) {
                cache.insert(i, predict_entire_world(entire, scene)?);
            }
            cache[&i].clone()
        } else {
            predict_entire_world(entire, scene)?
        };
        let patch = extract_random_patch(&scene.cloud.world_index, cfg.patch_size, rng)?;
        let views = choose_views(rng, scene, cfg.views_per_step)?;
        patch_step(params, scene, &g_e, &patch, &views, cfg, grads)
    })
}

/// Normalize, initialize, predict, denormalize, render every camera.
pub fn infer_entire(
    params: &ModuleParams<f32>,
    cloud: &PointCloud,
    cams: &[Camera],
    options: &RenderOptions,
    normal_k: usize,
) -> Result<(Gaussian2DSet<f32>, Vec<ImageBuffer<f32>>)> {
    let prepared = prepare_cloud(cloud, normal_k)?;
    let init: Gaussian2DSet<f32> = prepared.init.cast();
    let index = NeighborIndex::from_positions(prepared.init.positions.clone())?;
    let nb = Neighborhoods::from_index(&index, params.arch.encoder_knn)?;
    let (pred, _) = forward_with_cache(params, &init, &nb)?;
    let world = denormalize_gaussians(&pred, &prepared.transform)?;
    let images = cams.iter().map(|c| render(&world, c, options)).collect::<Result<_>>()?;
    Ok((world, images))
}

/// Cover the cloud with patches, predict each with the patch module, and
/// render the concatenation. Clouds smaller than a patch fall back to one
/// pass over the whole cloud.
#[allow(clippy::too_many_arguments)]
pub fn infer_patchwise(
    params: &ModuleParams<f32>,
    cloud: &PointCloud,
    cams: &[Camera],
    options: &RenderOptions,
    patch_size: usize,
    own_normalization: bool,
    normal_k: usize,
    seed: u64,
) -> Result<(Gaussian2DSet<f32>, Vec<ImageBuffer<f32>>)> {
    if cloud.len() < patch_size {
        log::warn!(
            "cloud has {} points, fewer than the patch size {patch_size}; using one pass over the whole cloud",
            cloud.len()
        );
        return infer_entire(params, cloud, cams, options, normal_k);
    }
    let prepared = prepare_cloud(cloud, normal_k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patches = cover_with_patches(&prepared.world_index, patch_size, &mut rng)?;
    let mut world = Gaussian2DSet::empty(crate::gaussians::Space::World);
    for patch in &patches {
        let inputs = patch_inputs::<f32>(&prepared, patch, own_normalization, params.arch.encoder_knn)?;
        let (pred, _) = forward_with_cache(params, &inputs.init, &inputs.neighborhoods)?;
        world = merge_sets(&world, &denormalize_gaussians(&pred, &inputs.transform)?)?;
    }
    let images = cams.iter().map(|c| render(&world, c, options)).collect::<Result<_>>()?;
    Ok((world, images))
}

/// Scores of the entire module on every view of a prepared scene.
pub fn evaluate_entire(params: &ModuleParams<f32>, scene: &PreparedScene) -> Result<Vec<ViewScore>> {
    let world = predict_entire_world(params, scene)?;
    evaluate_set(&world, scene)
}

/// Scores of an arbitrary world-space set on every view of a scene.
pub fn evaluate_set(world: &Gaussian2DSet<f32>, scene: &PreparedScene) -> Result<Vec<ViewScore>> {
    let preds = scene
        .cameras
        .iter()
        .map(|c| render(world, c, &scene.options))
        .collect::<Result<Vec<_>>>()?;
    score_views(&preds, &scene.images)
}

/// Scores of the frozen background composited with the patch module's
/// prediction for `patch`.
pub fn evaluate_composed(
    entire: &ModuleParams<f32>,
    patch_params: &ModuleParams<f32>,
    scene: &PreparedScene,
    patch: &Patch,
    own_normalization: bool,
) -> Result<Vec<ViewScore>> {
    let g_e = predict_entire_world(entire, scene)?;
    let inputs = patch_inputs::<f32>(&scene.cloud, patch, own_normalization, patch_params.arch.encoder_knn)?;
    let (pred, _) = forward_with_cache(patch_params, &inputs.init, &inputs.neighborhoods)?;
    let p_world = denormalize_gaussians(&pred, &inputs.transform)?;
    evaluate_set(&compose_entire_patch(&g_e, &p_world, patch, patch_params.arch.k)?, scene)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewScore {
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
}

pub fn score_views(preds: &[ImageBuffer<f32>], gts: &[ImageBuffer<f32>]) -> Result<Vec<ViewScore>> {
    if preds.len() != gts.len() {
        return Err(Error::invalid("prediction and ground-truth counts differ"));
    }
    preds
        .iter()
        .zip(gts)
        .enumerate()
        .map(|(view, (p, g))| {
            Ok(ViewScore {
                view,
                psnr: metrics::psnr(p, g)?,
                ssim: metrics::ssim(p, g)?.0,
            })
        })
        .collect()
}

pub fn mean_scores(scores: &[ViewScore]) -> (f64, f64) {
    let n = scores.len().max(1) as f64;
    (
        scores.iter().map(|s| s.psnr).sum::<f64>() / n,
        scores.iter().map(|s| s.ssim).sum::<f64>() / n,
    )
}

/// `view,psnr,ssim` rows followed by a `mean` row.
pub fn scores_csv(scores: &[ViewScore]) -> String {
    let mut s = String::from("view,psnr,ssim\n");
    for v in scores {
        let _ = writeln!(s, "{},{:.6},{:.6}", v.view, v.psnr, v.ssim);
    }
    let (p, q) = mean_scores(scores);
    let _ = writeln!(s, "mean,{p:.6},{q:.6}");
    s
}
