//! Command-line interface.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use splat_avatar::avatar::Avatar;
use splat_avatar::io::{load_scene, write_param_maps, write_synthetic_bundle, Scene, SyntheticSpec};
use splat_avatar::nn::{DecoderConfig, Decoders, Precision};
use splat_avatar::render::Camera;
use splat_avatar::train::{
    even_frames, fit_pseudo_gt, load_frames, prepare_frame, pretrain_decoders, train_full, write_log, FitConfig,
    PretrainConfig, PretrainSample, TrainConfig, TrainState, LOG_HEADER,
};

use crate::bench::{run_benchmark, BenchmarkReport};
use crate::error::{CliError, CliResult};
use crate::pipeline::{FramePipeline, Model};
use crate::record::{record_path_for, RecordBuilder, RECORD_FILE};

#[derive(Debug, Parser)]
#[command(name = "splat-avatar", version, about = "Animatable Gaussian splat avatars")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render one pose from one camera.
    Render(RenderArgs),
    /// Time the four pipeline stages.
    Benchmark(BenchmarkArgs),
    /// Stream rendered frames over WebSocket.
    Serve(ServeArgs),
    /// Fit per-frame pseudo ground truth with frozen splat positions.
    Fit(FitArgs),
    /// Pretrain the decoders on fitted snapshots.
    Pretrain(PretrainArgs),
    /// Train the decoders photometrically through the whole chain.
    Train(TrainArgs),
    /// Write a synthetic self-consistent scene bundle.
    MakeSynthetic(MakeSyntheticArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ImageFormat {
    Png,
    /// 32-bit float dump (`ASHI`).
    Float,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// `.ashp` parameter maps or `.ashw` decoder weights.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub pose_frame: usize,
    /// Camera index or name.
    #[arg(long, default_value = "0")]
    pub camera: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = ImageFormat::Png)]
    pub format: ImageFormat,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Frames to render; the first is a warmup and is not timed.
    #[arg(long, default_value_t = 100)]
    pub frames: usize,
    /// Output size WxH; defaults to the camera's own.
    #[arg(long, value_parser = parse_size)]
    pub size: Option<(usize, usize)>,
    /// Texel resolution; defaults to the scene's.
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long, default_value = "0")]
    pub camera: String,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 8765)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Output directory for `snapshot_fNNNN.ashp` files.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of evenly spaced frames to fit.
    #[arg(long, default_value_t = 4)]
    pub warmup_frames: usize,
    /// Explicit frame indices; overrides --warmup-frames.
    #[arg(long, value_delimiter = ',')]
    pub frames: Option<Vec<usize>>,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    /// Stop a frame early once its mean PSNR reaches this value.
    #[arg(long)]
    pub target_psnr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Directory written by `fit`.
    #[arg(long)]
    pub snapshots: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub levels: usize,
    #[arg(long, default_value_t = 16)]
    pub base_channels: usize,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Seeds both weight initialization and snapshot order.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Per-step loss CSV.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PrecisionArg::F64)]
    pub precision: PrecisionArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Initial decoder weights.
    #[arg(long, conflicts_with = "resume", required_unless_present = "resume")]
    pub init: Option<PathBuf>,
    /// Training state to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Training state written at the end (or at the last good step).
    #[arg(long)]
    pub out: PathBuf,
    /// Metric log CSV; appended to when resuming.
    #[arg(long)]
    pub log: PathBuf,
    /// Total step count, including steps done before a resume.
    #[arg(long, default_value_t = 5000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub lr_geo: f64,
    #[arg(long, default_value_t = 2e-4)]
    pub lr_app: f64,
    #[arg(long)]
    pub views_per_step: Option<usize>,
    /// Training frame indices; all frames by default.
    #[arg(long, value_delimiter = ',')]
    pub frames: Option<Vec<usize>>,
    #[arg(long, default_value_t = 250)]
    pub print_every: usize,
}

#[derive(Debug, Args)]
pub struct MakeSyntheticArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub cameras: usize,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    #[arg(long, default_value_t = 96)]
    pub width: usize,
    #[arg(long, default_value_t = 96)]
    pub height: usize,
    #[arg(long, default_value_t = 32)]
    pub resolution: usize,
    /// Skip rendering the ground-truth images.
    #[arg(long)]
    pub no_images: bool,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WxH")?;
    let w: usize = w.parse().map_err(|_| "bad width")?;
    let h: usize = h.parse().map_err(|_| "bad height")?;
    if w == 0 || h == 0 || w > u16::MAX as usize || h > u16::MAX as usize {
        return Err("size must be within 1..=65535".into());
    }
    Ok((w, h))
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Render(a) => render_cmd(a),
        Command::Benchmark(a) => benchmark_cmd(a),
        Command::Serve(a) => serve_cmd(a),
        Command::Fit(a) => fit_cmd(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::MakeSynthetic(a) => make_synthetic_cmd(a),
    }
}

fn open_scene(path: &Path) -> CliResult<Scene> {
    load_scene(path).map_err(CliError::input)
}

fn pick_camera(scene: &Scene, which: &str) -> CliResult<usize> {
    if let Some(i) = scene.camera_names.iter().position(|n| n == which) {
        return Ok(i);
    }
    match which.parse::<usize>() {
        Ok(i) if i < scene.cameras.len() => Ok(i),
        _ => Err(CliError::input(format!(
            "no camera `{which}` (scene has {} cameras: {})",
            scene.cameras.len(),
            scene.camera_names.join(", ")
        ))),
    }
}

fn pick_frame(scene: &Scene, f: usize) -> CliResult<usize> {
    if f < scene.frame_count() {
        Ok(f)
    } else {
        Err(CliError::input(format!(
            "pose frame {f} out of range (scene has {} frames)",
            scene.frame_count()
        )))
    }
}

fn pipeline_for(scene: &Scene, checkpoint: &Path, resolution: Option<usize>) -> CliResult<FramePipeline> {
    let model = Model::load(checkpoint)?;
    let r = resolution.unwrap_or(scene.manifest.resolution);
    let avatar = Avatar::new(scene.rig.clone(), r).map_err(CliError::input)?;
    FramePipeline::new(avatar, model, scene.manifest.background)
}

fn render_cmd(a: RenderArgs) -> CliResult<()> {
    let scene = open_scene(&a.scene)?;
    let pipeline = pipeline_for(&scene, &a.checkpoint, None)?;
    let f = pick_frame(&scene, a.pose_frame)?;
    let c = pick_camera(&scene, &a.camera)?;
    let (image, _) = pipeline.run(&scene.poses[f], &scene.graph_frames[f], &scene.cameras[c])?;
    match a.format {
        ImageFormat::Png => image.write_png(&a.out)?,
        ImageFormat::Float => image.write_float(&a.out)?,
    }
    Ok(())
}

/// Same view with the image plane resampled to `w x h`.
pub fn resize_camera(cam: &Camera, w: usize, h: usize) -> Camera {
    let (sx, sy) = (w as f64 / cam.width as f64, h as f64 / cam.height as f64);
    let mut c = cam.clone();
    c.fx *= sx;
    c.cx *= sx;
    c.fy *= sy;
    c.cy *= sy;
    c.width = w;
    c.height = h;
    c
}

fn benchmark_cmd(a: BenchmarkArgs) -> CliResult<()> {
    if a.frames < 2 {
        return Err(CliError::input(format!(
            "--frames {} leaves nothing to time: need at least 2 (the first is a warmup)",
            a.frames
        )));
    }
    let scene = open_scene(&a.scene)?;
    let pipeline = pipeline_for(&scene, &a.checkpoint, a.resolution)?;
    let c = pick_camera(&scene, &a.camera)?;
    let camera = match a.size {
        Some((w, h)) => resize_camera(&scene.cameras[c], w, h),
        None => scene.cameras[c].clone(),
    };
    let report: BenchmarkReport = run_benchmark(&pipeline, &scene.poses, &scene.graph_frames, &camera, a.frames)?;
    print!("{}", report.table());
    std::io::stdout().flush()?;
    Ok(())
}

fn serve_cmd(a: ServeArgs) -> CliResult<()> {
    let scene = open_scene(&a.scene)?;
    let pipeline = pipeline_for(&scene, &a.checkpoint, None)?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(crate::thread_count())
        .enable_all()
        .build()?;
    rt.block_on(async move {
        let addr = format!("{}:{}", a.host, a.port);
        let server = crate::server::Server::bind(&addr, pipeline, scene.poses[0].clone(), scene.cameras[0].clone())
            .await
            .map_err(|e| CliError::runtime(format!("cannot listen on {addr}: {e}")))?;
        println!("listening on {}", server.local_addr()?);
        std::io::stdout().flush()?;
        server.run().await.map_err(CliError::runtime)
    })
}

pub fn snapshot_file_name(frame: usize) -> String {
    format!("snapshot_f{frame:04}.ashp")
}

fn parse_snapshot_name(name: &str) -> Option<usize> {
    name.strip_prefix("snapshot_f")?.strip_suffix(".ashp")?.parse().ok()
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("{}: {e}", dir.display())))
}

fn fit_cmd(a: FitArgs) -> CliResult<()> {
    let scene = open_scene(&a.scene)?;
    if scene.manifest.images.is_none() {
        return Err(CliError::input("fitting needs a scene with images"));
    }
    let frames = match &a.frames {
        Some(list) => list.clone(),
        None => even_frames(scene.frame_count(), a.warmup_frames),
    };
    if frames.is_empty() {
        return Err(CliError::input("no frames selected"));
    }
    let avatar = Avatar::new(scene.rig.clone(), scene.manifest.resolution).map_err(CliError::input)?;
    let data = load_frames(&scene, &avatar, &frames).map_err(CliError::input)?;
    let cfg = FitConfig {
        steps: a.steps,
        lr: a.lr,
        background: scene.manifest.background,
        target_psnr: a.target_psnr,
        ..FitConfig::default()
    };
    let snaps = fit_pseudo_gt(&avatar, &data, &cfg)?;

    create_dir(&a.out)?;
    let mask = avatar.table.mask();
    let mut csv = String::from("frame,steps,loss,l1,ssim,psnr\n");
    for (f, s) in frames.iter().zip(&snaps) {
        write_param_maps(&a.out.join(snapshot_file_name(*f)), &s.maps, &mask)?;
        let m = &s.metrics;
        csv.push_str(&format!("{f},{},{:e},{:e},{:e},{:e}\n", s.steps, m.loss, m.l1, m.ssim, m.psnr));
        println!("frame {f}: {} steps, PSNR {:.2} dB, SSIM {:.4}", s.steps, m.psnr, m.ssim);
    }
    let metrics = a.out.join("fit_metrics.csv");
    std::fs::write(&metrics, csv).map_err(|e| CliError::runtime(format!("{}: {e}", metrics.display())))?;

    let mut rec = RecordBuilder::default();
    rec.dir("scene", &a.scene)?;
    rec.finish(
        "fit",
        None,
        json!({ "frames": frames, "steps": a.steps, "lr": a.lr, "target_psnr": a.target_psnr }),
    )
    .write(&a.out.join(RECORD_FILE))
}

fn pretrain_cmd(a: PretrainArgs) -> CliResult<()> {
    let scene = open_scene(&a.scene)?;
    let avatar = Avatar::new(scene.rig.clone(), scene.manifest.resolution).map_err(CliError::input)?;
    let entries = std::fs::read_dir(&a.snapshots)
        .map_err(|e| CliError::input(format!("{}: {e}", a.snapshots.display())))?;
    let mut found: Vec<(usize, PathBuf)> = Vec::new();
    for e in entries {
        let p = e?.path();
        if let Some(f) = p.file_name().and_then(|n| n.to_str()).and_then(parse_snapshot_name) {
            found.push((f, p));
        }
    }
    found.sort();
    if found.is_empty() {
        return Err(CliError::input(format!("no snapshot_f*.ashp files in {}", a.snapshots.display())));
    }
    let mut samples = Vec::with_capacity(found.len());
    let mut rec = RecordBuilder::default();
    rec.dir("scene", &a.scene)?;
    for (f, path) in &found {
        let f = pick_frame(&scene, *f)?;
        let (target, _) = splat_avatar::io::read_param_maps(path).map_err(CliError::input)?;
        let frame = prepare_frame(&avatar, &scene.poses[f], &scene.graph_frames[f], Vec::new())?;
        samples.push(PretrainSample {
            input: frame.input,
            root: frame.root,
            target,
        });
        rec.file(format!("snapshots/{}", snapshot_file_name(f)), path)?;
    }

    let config = DecoderConfig::new(a.levels, a.base_channels);
    let mut dec = Decoders::new(config, a.seed).map_err(CliError::input)?;
    let cfg = PretrainConfig {
        steps: a.steps,
        lr: a.lr,
        seed: a.seed,
    };
    let losses = pretrain_decoders(&avatar, &mut dec, &samples, &cfg).map_err(|e| match e {
        splat_avatar::Error::InvalidInput(_) | splat_avatar::Error::Mismatch { .. } => CliError::input(e),
        other => other.into(),
    })?;
    let precision = match a.precision {
        PrecisionArg::F32 => Precision::F32,
        PrecisionArg::F64 => Precision::F64,
    };
    dec.save(&a.out, precision)?;
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        println!("pretrain loss {first:.4e} -> {last:.4e} over {} steps", losses.len());
    }
    if let Some(log) = &a.log {
        let text: String = std::iter::once("step,loss\n".to_string())
            .chain(losses.iter().enumerate().map(|(k, l)| format!("{k},{l:e}\n")))
            .collect();
        std::fs::write(log, text).map_err(|e| CliError::runtime(format!("{}: {e}", log.display())))?;
    }
    rec.finish(
        "pretrain",
        Some(a.seed),
        json!({
            "levels": a.levels,
            "base_channels": a.base_channels,
            "steps": a.steps,
            "lr": a.lr,
            "frames": found.iter().map(|(f, _)| f).collect::<Vec<_>>(),
        }),
    )
    .write(&record_path_for(&a.out))
}

fn append_log(path: &Path, rows: &[splat_avatar::train::LogRow]) -> CliResult<()> {
    let mut f = std::fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    let text: String = rows.iter().map(|r| r.csv() + "\n").collect();
    f.write_all(text.as_bytes())?;
    Ok(())
}

fn train_cmd(a: TrainArgs) -> CliResult<()> {
    let scene = open_scene(&a.scene)?;
    if scene.manifest.images.is_none() {
        return Err(CliError::input("training needs a scene with images"));
    }
    let avatar = Avatar::new(scene.rig.clone(), scene.manifest.resolution).map_err(CliError::input)?;
    let frames = a.frames.clone().unwrap_or_else(|| (0..scene.frame_count()).collect());
    let data = load_frames(&scene, &avatar, &frames).map_err(CliError::input)?;

    let mut rec = RecordBuilder::default();
    rec.dir("scene", &a.scene)?;
    let (mut state, resuming) = match (&a.init, &a.resume) {
        (_, Some(r)) => {
            if !r.is_file() {
                return Err(CliError::input(format!("checkpoint not found: {}", r.display())));
            }
            rec.file("resume", r)?;
            (TrainState::load(r).map_err(CliError::input)?, true)
        }
        (Some(i), None) => {
            let Model::Decoders(d) = Model::load(i)? else {
                return Err(CliError::input(format!("{}: expected decoder weights", i.display())));
            };
            rec.file("init", i)?;
            (TrainState::new(*d), false)
        }
        (None, None) => unreachable!("clap requires --init or --resume"),
    };
    let start_step = state.step;
    let cfg = TrainConfig {
        steps: a.steps,
        lr_geo: a.lr_geo,
        lr_app: a.lr_app,
        background: scene.manifest.background,
        seed: a.seed,
        views_per_step: a.views_per_step.unwrap_or(usize::MAX),
        ..TrainConfig::default()
    };
    let every = a.print_every.max(1);
    let result = train_full(&avatar, &mut state, &data, &cfg, |r| {
        if r.step % every == 0 {
            println!(
                "step {}: loss {:.4e}, PSNR {:.2} dB, SSIM {:.4}",
                r.step, r.metrics.loss, r.metrics.psnr, r.metrics.ssim
            );
        }
    });
    // Written even on divergence: it holds the last good step.
    state.save(&a.out)?;
    let rows = result?;
    if resuming && a.log.is_file() {
        append_log(&a.log, &rows)?;
    } else {
        write_log(&a.log, &rows)?;
    }
    rec.finish(
        "train",
        Some(a.seed),
        json!({
            "steps": a.steps,
            "start_step": start_step,
            "lr_geo": a.lr_geo,
            "lr_app": a.lr_app,
            "views_per_step": a.views_per_step,
            "frames": frames,
            "log_columns": LOG_HEADER,
        }),
    )
    .write(&record_path_for(&a.out))
}

fn make_synthetic_cmd(a: MakeSyntheticArgs) -> CliResult<()> {
    let spec = SyntheticSpec {
        cameras: a.cameras,
        frames: a.frames,
        width: a.width,
        height: a.height,
        resolution: a.resolution,
        seed: a.seed,
    };
    create_dir(&a.out)?;
    write_synthetic_bundle(&spec, &a.out, !a.no_images)?;
    RecordBuilder::default()
        .finish(
            "make-synthetic",
            Some(a.seed),
            json!({
                "cameras": a.cameras,
                "frames": a.frames,
                "width": a.width,
                "height": a.height,
                "resolution": a.resolution,
                "images": !a.no_images,
            }),
        )
        .write(&a.out.join(RECORD_FILE))
}
