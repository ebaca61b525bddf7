use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use splatpatch::checkpoint::{load_checkpoint, load_gaussians, save_checkpoint, save_gaussians};
use splatpatch::gaussians::denormalize_gaussians;
use splatpatch::geometry::{build_index, estimate_normals, normalize_cloud};
use splatpatch::manifest::SceneManifest;
use splatpatch::pipeline::{self, TrainArtifacts, TrainConfig};
use splatpatch::synthdata::{emit_dataset, find_manifests, DatasetConfig, SceneKind};
use splatpatch::{gradcheck, imageio, metrics, ply, Error, RenderOptions};

#[derive(Parser)]
#[command(name = "splatpatch", version, about = "Point clouds to 2D Gaussian splats")]
struct Cli {
    /// Worker threads (default: SPLATPATCH_THREADS, else all logical cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        /// Comma-separated scene kinds: cube, sphere, checker_plane, two_spheres.
        #[arg(long, default_value = "cube", value_delimiter = ',')]
        kinds: Vec<String>,
        #[arg(long, default_value_t = 1)]
        scenes: usize,
        #[arg(long, default_value_t = 16)]
        views: usize,
        /// `WxH` or a single size for square images.
        #[arg(long, default_value = "64")]
        res: String,
        #[arg(long, default_value_t = 2048)]
        points: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Estimate PCA normals and write them into a PLY.
    Normals {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 16)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the geometric initialization of a cloud as a Gaussian checkpoint.
    Init {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 16)]
        normal_k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one manifest view of a Gaussian checkpoint.
    Render {
        #[arg(long)]
        gaussians: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        view: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the entire-cloud module.
    TrainEntire {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Loss log (CSV); defaults to `<out>.loss.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the patch module against a frozen entire module.
    TrainPatch {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        entire: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Per-view PSNR/SSIM of trained modules on a scene.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        entire: PathBuf,
        #[arg(long)]
        patch: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = GradModule::All)]
        module: GradModule,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Rendering throughput.
    Bench {
        #[arg(long, default_value_t = 10_000)]
        gaussians: usize,
        #[arg(long, default_value = "256x256")]
        res: String,
        #[arg(long, default_value_t = 20)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Cover a cloud with k-NN patches.
    Patchify {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "np", default_value_t = 2048)]
        patch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print per-patch membership statistics.
        #[arg(long)]
        stats: bool,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GradModule {
    Rasterizer,
    Network,
    Metrics,
    All,
}

/// Failure with its exit code.
enum Failure {
    Usage(String),
    Lib(Error),
    /// A check that ran to completion and did not pass.
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    fn code_and_kind(&self) -> (u8, &'static str) {
        match self {
            Failure::Usage(_) => (1, "usage"),
            Failure::Numeric(_) => (3, "numeric"),
            Failure::Lib(e) if e.is_numeric_error() => (3, "numeric"),
            Failure::Lib(e) if e.is_data_error() => (2, "data"),
            Failure::Lib(_) => (1, "usage"),
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(m) | Failure::Numeric(m) => m.clone(),
            Failure::Lib(e) => e.to_string(),
        }
    }
}

type CliResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            eprintln!("splatpatch: error kind=usage code=1 msg={first:?}");
            return ExitCode::from(1);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, kind) = f.code_and_kind();
            let msg = f.message().replace('\n', " ");
            eprintln!("splatpatch: error kind={kind} code={code} msg={msg:?}");
            ExitCode::from(code)
        }
    }
}

fn threads(flag: Option<usize>) -> std::result::Result<Option<usize>, Failure> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("SPLATPATCH_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::Usage(format!("SPLATPATCH_THREADS must be a positive integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> CliResult {
    if let Some(n) = threads(cli.threads)? {
        if n == 0 {
            return Err(Failure::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    match cli.command {
        Command::Synth {
            kinds,
            scenes,
            views,
            res,
            points,
            out,
            seed,
        } => {
            let kinds = kinds
                .iter()
                .map(|k| k.parse::<SceneKind>())
                .collect::<splatpatch::Result<Vec<_>>>()?;
            let (width, height) = parse_res(&res)?;
            let cfg = DatasetConfig {
                kinds,
                scenes,
                views,
                width,
                height,
                points,
                seed,
                ..DatasetConfig::default()
            };
            let manifests = emit_dataset(&cfg, &out)?;
            for m in &manifests {
                println!("{}", m.display());
            }
        }
        Command::Normals { input, k, out } => {
            let cloud = ply::read_ply(&input)?;
            let (normalized, _) = normalize_cloud(&cloud)?;
            let index = build_index(&normalized)?;
            let normals = estimate_normals(&normalized, &index, k.min(cloud.len()))?;
            ply::write_ply(&cloud.without_normals().with_normals(normals)?, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Init { input, normal_k, out } => {
            let prepared = pipeline::prepare_cloud(&ply::read_ply(&input)?, normal_k)?;
            let world = denormalize_gaussians(&prepared.init, &prepared.transform)?;
            save_gaussians(&world.cast::<f32>(), &out)?;
            println!("gaussians={} out={}", world.len(), out.display());
        }
        Command::Render {
            gaussians,
            manifest,
            view,
            out,
        } => {
            let m = SceneManifest::load(&manifest)?;
            let v = m.views.get(view).ok_or_else(|| {
                Failure::Usage(format!("view {view} out of range ({} views)", m.views.len()))
            })?;
            let g = load_gaussians::<f32>(&gaussians)?;
            let img = splatpatch::render(&g, &v.camera, &RenderOptions::with_background(m.background))?;
            imageio::write_image(&img, &out)?;
            let gt = m.load_image::<f32>(view)?;
            println!("view={view} psnr={:.4} out={}", metrics::psnr(&img, &gt)?, out.display());
        }
        Command::TrainEntire { data, config, out, log } => {
            let cfg = load_config(config.as_deref())?;
            print!("{}", cfg.to_text());
            let scenes = pipeline::load_scenes(&find_manifests(&data)?, &cfg)?;
            let artifacts = artifacts(&out, log);
            let outcome = pipeline::train_entire(&scenes, &cfg, &artifacts)?;
            save_checkpoint(&outcome.checkpoint, &out)?;
            report_training(&outcome, &out);
        }
        Command::TrainPatch {
            data,
            entire,
            config,
            out,
            log,
        } => {
            let cfg = load_config(config.as_deref())?;
            print!("{}", cfg.to_text());
            let frozen = load_checkpoint::<f32>(&entire)?.params;
            let scenes = pipeline::load_scenes(&find_manifests(&data)?, &cfg)?;
            let artifacts = artifacts(&out, log);
            let outcome = pipeline::train_patch(&scenes, &frozen, &cfg, &artifacts)?;
            save_checkpoint(&outcome.checkpoint, &out)?;
            report_training(&outcome, &out);
        }
        Command::Eval {
            manifest,
            entire,
            patch,
            config,
            report,
            seed,
        } => {
            let cfg = load_config(config.as_deref())?;
            let m = SceneManifest::load(&manifest)?;
            let cloud = m.load_cloud()?;
            let cams = m.cameras();
            let gts = m.load_images::<f32>()?;
            let opts = RenderOptions::with_background(cfg.background.unwrap_or(m.background));
            let e = load_checkpoint::<f32>(&entire)?.params;
            let (_, imgs) = pipeline::infer_entire(&e, &cloud, &cams, &opts, cfg.normal_k)?;
            let mut rows = vec![("entire", pipeline::score_views(&imgs, &gts)?)];
            if let Some(p) = patch {
                let p = load_checkpoint::<f32>(&p)?.params;
                let (_, imgs) = pipeline::infer_patchwise(
                    &p,
                    &cloud,
                    &cams,
                    &opts,
                    cfg.patch_size,
                    cfg.patch_own_normalization,
                    cfg.normal_k,
                    seed,
                )?;
                rows.push(("patchwise", pipeline::score_views(&imgs, &gts)?));
            }
            let mut csv = String::from("mode,view,psnr,ssim\n");
            for (mode, scores) in &rows {
                for s in scores {
                    csv.push_str(&format!("{mode},{},{:.6},{:.6}\n", s.view, s.psnr, s.ssim));
                }
                let (p, q) = pipeline::mean_scores(scores);
                csv.push_str(&format!("{mode},mean,{p:.6},{q:.6}\n"));
                println!("mode={mode} views={} psnr={p:.4} ssim={q:.4}", scores.len());
            }
            if let Some(path) = report {
                std::fs::write(&path, csv).map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?;
            }
        }
        Command::Gradcheck { module, trials, seed } => {
            let mut failed = Vec::new();
            let runs: &[(GradModule, &str)] = &[
                (GradModule::Rasterizer, "rasterizer"),
                (GradModule::Metrics, "metrics"),
                (GradModule::Network, "network"),
            ];
            for &(m, name) in runs {
                if module != GradModule::All && module != m {
                    continue;
                }
                let report = match m {
                    GradModule::Rasterizer => gradcheck::check_rasterizer(trials, seed)?,
                    GradModule::Metrics => gradcheck::check_metrics(trials, seed)?,
                    _ => gradcheck::check_network(trials.min(4), seed)?,
                };
                println!("module={name} {report}");
                if !report.passed() {
                    failed.push(name);
                }
            }
            if !failed.is_empty() {
                return Err(Failure::Numeric(format!("gradient check failed: {}", failed.join(","))));
            }
        }
        Command::Bench {
            gaussians,
            res,
            frames,
            seed,
        } => {
            let (w, h) = parse_res(&res)?;
            if frames == 0 {
                return Err(Failure::Usage("--frames must be positive".into()));
            }
            println!("{}", splatpatch::bench::run_bench(gaussians, w, h, frames, seed)?);
        }
        Command::Patchify {
            input,
            patch_size,
            seed,
            stats,
        } => {
            let cloud = ply::read_ply(&input)?;
            let index = build_index(&cloud)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let patches = pipeline::cover_with_patches(&index, patch_size, &mut rng)?;
            let mut hits = vec![0usize; cloud.len()];
            for p in &patches {
                for &i in &p.member_indices {
                    hits[i] += 1;
                }
            }
            let covered = hits.iter().filter(|&&h| h > 0).count();
            println!(
                "points={} patch_size={patch_size} patches={} covered={covered} coverage={:.4} max_multiplicity={}",
                cloud.len(),
                patches.len(),
                covered as f64 / cloud.len() as f64,
                hits.iter().max().copied().unwrap_or(0)
            );
            if stats {
                for (i, p) in patches.iter().enumerate() {
                    let shared = p.member_indices.iter().filter(|&&j| hits[j] > 1).count();
                    println!("patch={i} center={} members={} shared={shared}", p.center_index, p.member_indices.len());
                }
            }
        }
    }
    Ok(())
}

fn parse_res(s: &str) -> std::result::Result<(usize, usize), Failure> {
    let bad = || Failure::Usage(format!("resolution `{s}` must look like 64 or 64x48"));
    let (w, h) = match s.split_once('x') {
        Some((w, h)) => (w.parse().map_err(|_| bad())?, h.parse().map_err(|_| bad())?),
        None => {
            let v = s.parse().map_err(|_| bad())?;
            (v, v)
        }
    };
    if w == 0 || h == 0 {
        return Err(bad());
    }
    Ok((w, h))
}

fn load_config(path: Option<&Path>) -> std::result::Result<TrainConfig, Failure> {
    Ok(match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    })
}

fn artifacts(out: &Path, log: Option<PathBuf>) -> TrainArtifacts {
    let with_suffix = |suffix: &str| {
        let mut s = out.as_os_str().to_os_string();
        s.push(suffix);
        PathBuf::from(s)
    };
    TrainArtifacts {
        checkpoint: Some(out.to_path_buf()),
        best: Some(with_suffix(".best")),
        loss_csv: Some(log.unwrap_or_else(|| with_suffix(".loss.csv"))),
    }
}

fn report_training(outcome: &pipeline::TrainOutcome, out: &Path) {
    let last = outcome.history.iter().rev().find(|r| !r.skipped);
    let skipped = outcome.history.iter().filter(|r| r.skipped).count();
    match last {
        Some(r) => println!(
            "epochs={} steps={} skipped={skipped} final_loss={:.6} final_psnr={:.4} out={}",
            outcome.epochs,
            outcome.history.len(),
            r.loss,
            metrics::psnr_from_mse(r.mse),
            out.display()
        ),
        None => println!("epochs={} steps=0 out={}", outcome.epochs, out.display()),
    }
}
