//! Command-line front end: simulate, train, track, eval and bench.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{self, SceneManifest};
use crate::metrics::{self, EvalConfig, MetricsReport};
use crate::scenesim::{self, SimConfig};
use crate::tracker::{load_model, window_ranges, PreparedVideo, TrackerConfig, Video};
use crate::training::{add_depth_noise, read_log, stream_rng, write_log, TrainConfig, TrainSample, Trainer};

#[derive(Debug, Parser)]
#[command(name = "mvtrack", version, about = "Multi-view 3D point tracking")]
pub struct Cli {
    /// Worker threads; 1 gives bit-identical outputs across runs.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-view RGB-D dataset.
    Simulate(SimulateArgs),
    /// Train a tracker on a dataset directory.
    Train(TrainArgs),
    /// Track query points through one scene.
    Track(TrackArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Measure tracking throughput.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// JSON simulator config; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub tracks: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `simulate`.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to write; `<out>.json`, `<out>.opt` and `<out>.log.csv` go next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON training config; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Use the small model preset.
    #[arg(long)]
    pub toy: bool,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Disable every augmentation.
    #[arg(long)]
    pub no_augment: bool,
    /// Continue from `--out` if it exists.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many total steps; the schedule still spans `--steps`.
    #[arg(long)]
    pub stop_at: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Query CSV; defaults to the scene's `queries.csv`.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated view indices to use.
    #[arg(long, value_delimiter = ',')]
    pub views: Option<Vec<usize>>,
    /// Depth subdirectory of the scene.
    #[arg(long, default_value = "depth")]
    pub depth_source: String,
    /// Std of Gaussian noise added to every valid depth, world units.
    #[arg(long, default_value_t = 0.0)]
    pub depth_noise: f64,
    #[arg(long, default_value_t = 0)]
    pub noise_seed: u64,
    /// Override the window length T.
    #[arg(long)]
    pub window: Option<usize>,
    /// Override the refinement iterations M.
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub vis_threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Prediction CSV, or a directory of `<scene>.csv` files when `--gt` is a dataset.
    #[arg(long)]
    pub pred: PathBuf,
    /// GT CSV, or a dataset directory.
    #[arg(long)]
    pub gt: PathBuf,
    /// JSON report path.
    #[arg(long)]
    pub out: PathBuf,
    /// Flat `scene,track,metric,value` CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Comma-separated distance thresholds before scaling.
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,
    /// Threshold scale for a single CSV pair; datasets read it per scene.
    #[arg(long)]
    pub threshold_scale: Option<f64>,
    /// Scene directory of a single CSV pair; supplies the threshold scale and
    /// cameras for 2D pixel accuracy.
    #[arg(long)]
    pub scene: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Use only the first N frames.
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long, default_value_t = 3)]
    pub repeat: usize,
    #[arg(long, default_value = "depth")]
    pub depth_source: String,
}

/// Record of one command invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    /// SHA-256 of the canonical JSON config.
    pub config_hash: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub threads: Option<usize>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    /// First 12 hex digits of the SHA-256 over all output bytes.
    pub artifact_version: String,
    pub tool_version: String,
    /// Seconds per timed region.
    pub timings: BTreeMap<String, f64>,
}

pub fn config_hash<S: Serialize>(config: &S) -> Result<String> {
    let bytes = serde_json::to_vec(config).map_err(|e| Error::invalid(format!("config is not serializable: {e}")))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of every regular file under `paths`, visited in sorted order.
pub fn artifact_version(paths: &[PathBuf]) -> Result<String> {
    let mut files = Vec::new();
    for p in paths {
        collect_files(p, &mut files)?;
    }
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.to_string_lossy().as_bytes());
        h.update(io::read_bytes(&f)?);
    }
    Ok(hex(&h.finalize())[..12].to_string())
}

fn collect_files(p: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if p.is_dir() {
        let rd = std::fs::read_dir(p).map_err(|e| io::IoError::io(p, e))?;
        for e in rd {
            let e = e.map_err(|e| io::IoError::io(p, e))?;
            collect_files(&e.path(), out)?;
        }
    } else if p.is_file() {
        out.push(p.to_path_buf());
    }
    Ok(())
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

struct Run {
    command: &'static str,
    config: serde_json::Value,
    seed: u64,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    timings: BTreeMap<String, f64>,
    manifest: PathBuf,
}

impl Run {
    fn write(self, threads: Option<usize>) -> Result<RunManifest> {
        let m = RunManifest {
            command: self.command.to_string(),
            args: std::env::args().collect(),
            config_hash: config_hash(&self.config)?,
            config: self.config,
            seed: self.seed,
            threads,
            inputs: self.inputs.iter().map(|p| p.display().to_string()).collect(),
            outputs: self.outputs.iter().map(|p| p.display().to_string()).collect(),
            artifact_version: artifact_version(&self.outputs)?,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            timings: self.timings,
        };
        io::write_json(&self.manifest, &m)?;
        Ok(m)
    }
}

fn to_value<S: Serialize>(s: &S) -> serde_json::Value {
    serde_json::to_value(s).unwrap_or(serde_json::Value::Null)
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

/// Parse-free entry point used by `main` and tests.
pub fn run(cli: Cli) -> Result<RunManifest> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::invalid("--threads must be >= 1"));
        }
        // a second call in one process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let run = match cli.command {
        Command::Simulate(a) => cmd_simulate(&a)?,
        Command::Train(a) => cmd_train(&a)?,
        Command::Track(a) => cmd_track(&a)?,
        Command::Eval(a) => cmd_eval(&a)?,
        Command::Bench(a) => cmd_bench(&a)?,
    };
    run.write(cli.threads)
}

fn cmd_simulate(a: &SimulateArgs) -> Result<Run> {
    let mut cfg: SimConfig = match &a.config {
        Some(p) => io::read_json(p)?,
        None => SimConfig::default(),
    };
    macro_rules! over {
        ($($f:ident => $g:ident),*) => { $( if let Some(v) = a.$f { cfg.$g = v; } )* };
    }
    over!(scenes => n_scenes, views => n_views, frames => n_frames, tracks => n_tracks, width => width, height => height, seed => seed);
    let t0 = Instant::now();
    scenesim::generate_dataset(&cfg, &a.out)?;
    let mut timings = BTreeMap::new();
    timings.insert("simulate".into(), secs(t0));
    Ok(Run {
        command: "simulate",
        config: to_value(&cfg),
        seed: cfg.seed,
        inputs: a.config.iter().cloned().collect(),
        outputs: vec![a.out.clone()],
        timings,
        manifest: a.out.join("run_manifest.json"),
    })
}

pub fn log_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".log.csv");
    PathBuf::from(s)
}

/// Load every scene of a dataset for training.
pub fn load_dataset(dir: &Path, depth_source: &str) -> Result<Vec<TrainSample>> {
    let scenes = scenesim::list_scenes(dir)?;
    if scenes.is_empty() {
        return Err(Error::invalid(format!("no scenes found in {}", dir.display())));
    }
    scenes.iter().map(|s| TrainSample::load(s, depth_source)).collect()
}

fn cmd_train(a: &TrainArgs) -> Result<Run> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => io::read_json(p)?,
        None => TrainConfig::default(),
    };
    if a.toy {
        cfg.model = TrackerConfig::toy();
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(lr) = a.lr {
        cfg.optimizer.lr = lr;
    }
    if a.no_augment {
        cfg.augment = crate::training::AugmentConfig::none();
    }
    cfg.validate()?;
    let t0 = Instant::now();
    let samples = load_dataset(&a.data, &cfg.depth_source)?;
    let load = secs(t0);
    let log = log_path(&a.out);
    let mut trainer = if a.resume && a.out.exists() {
        Trainer::resume(cfg.clone(), samples, &a.out, log.exists().then_some(log.as_path()))?
    } else {
        Trainer::new(cfg.clone(), samples)?
    };
    let t1 = Instant::now();
    let stop_at = a.stop_at.unwrap_or(u64::MAX);
    if trainer.step() < stop_at {
        trainer.run(Some(&a.out), Some(&log), |t, _| Ok(t.step() < stop_at))?;
    }
    if trainer.log.is_empty() || !log.exists() {
        // nothing to do; still leave a checkpoint and a log behind
        trainer.save(&a.out)?;
        write_log(&log, &trainer.log)?;
    }
    let mut timings = BTreeMap::new();
    timings.insert("load".into(), load);
    timings.insert("train".into(), secs(t1));
    let mut inputs = vec![a.data.clone()];
    inputs.extend(a.config.iter().cloned());
    Ok(Run {
        command: "train",
        config: to_value(&cfg),
        seed: cfg.seed,
        inputs,
        outputs: vec![a.out.clone(), crate::tracker::config_path(&a.out), crate::training::optimizer_path(&a.out), log],
        timings,
        manifest: manifest_path(&a.out),
    })
}

/// Everything `track` and `bench` resolve before running the model.
#[derive(Clone, Debug, Serialize)]
struct TrackSetup {
    views: Option<Vec<usize>>,
    depth_source: String,
    depth_noise: f64,
    noise_seed: u64,
    model: TrackerConfig,
    vis_threshold: f64,
}

/// Load a scene video with optional view selection and depth noise.
pub fn load_video(scene: &Path, depth_source: &str, views: Option<&[usize]>, depth_noise: f64, noise_seed: u64) -> Result<Video> {
    let data = io::load_scene(scene, depth_source)?;
    let mut video = Video::from_scene(&data);
    if let Some(v) = views {
        video = video.select_views(v)?;
    }
    if depth_noise < 0.0 || !depth_noise.is_finite() {
        return Err(Error::invalid("--depth-noise must be finite and >= 0"));
    }
    if depth_noise > 0.0 {
        add_depth_noise(&mut video, depth_noise, &mut stream_rng(noise_seed, 0))?;
    }
    Ok(video)
}

fn cmd_track(a: &TrackArgs) -> Result<Run> {
    let (mut tracker, store) = load_model(&a.checkpoint)?;
    if let Some(w) = a.window {
        tracker.config.window = w;
    }
    if let Some(m) = a.iterations {
        tracker.config.iterations = m;
    }
    tracker.config.validate()?;
    let vis_threshold = a.vis_threshold.unwrap_or(tracker.config.vis_threshold);
    let t0 = Instant::now();
    let video = load_video(&a.scene, &a.depth_source, a.views.as_deref(), a.depth_noise, a.noise_seed)?;
    let qpath = a.queries.clone().unwrap_or_else(|| a.scene.join("queries.csv"));
    let queries = io::read_queries(&qpath)?;
    let load = secs(t0);
    let t1 = Instant::now();
    let fwd = tracker.track(&store, &video, &queries)?;
    let track = secs(t1);
    io::write_predictions(&a.out, &fwd.rows(&queries, vis_threshold))?;
    let setup = TrackSetup {
        views: a.views.clone(),
        depth_source: a.depth_source.clone(),
        depth_noise: a.depth_noise,
        noise_seed: a.noise_seed,
        model: tracker.config.clone(),
        vis_threshold,
    };
    let mut timings = BTreeMap::new();
    timings.insert("load".into(), load);
    timings.insert("track".into(), track);
    Ok(Run {
        command: "track",
        config: to_value(&setup),
        seed: a.noise_seed,
        inputs: vec![a.scene.clone(), a.checkpoint.clone(), qpath],
        outputs: vec![a.out.clone()],
        timings,
        manifest: manifest_path(&a.out),
    })
}

fn scene_name(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "scene".into())
}

fn eval_one(
    cfg: &EvalConfig,
    pred: &[io::PredRow],
    gt: &[io::GtRow],
    scene: Option<&Path>,
    scale: Option<f64>,
) -> Result<(metrics::SceneReport, f64)> {
    let manifest: Option<SceneManifest> = scene.map(|d| io::read_json(&d.join("manifest.json"))).transpose()?;
    let scale = scale.or(manifest.as_ref().map(|m| m.threshold_scale)).unwrap_or(1.0);
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid("threshold scale must be positive"));
    }
    let series = metrics::align(pred, gt)?;
    let mut r = metrics::evaluate_series(&series, &cfg.scaled_thresholds(scale));
    if let (Some(d), Some(m)) = (scene, &manifest) {
        let cams = io::read_cameras(&d.join("cameras.json"), m.width, m.height)?;
        metrics::add_delta_2d(&mut r, &series, &cams, &cfg.pixel_thresholds);
    }
    Ok((r, scale))
}

fn cmd_eval(a: &EvalArgs) -> Result<Run> {
    let mut cfg = EvalConfig::default();
    if let Some(t) = &a.thresholds {
        cfg.thresholds = t.clone();
    }
    cfg.validate()?;
    let mut scenes = Vec::new();
    let mut inputs = vec![a.pred.clone(), a.gt.clone()];
    let mut scales = Vec::new();
    if a.gt.is_dir() {
        for dir in scenesim::list_scenes(&a.gt)? {
            let name = scene_name(&dir);
            let gt = io::read_gt_tracks(&dir.join("gt_tracks.csv"))?;
            let pred = io::read_predictions(&a.pred.join(format!("{name}.csv")))?;
            let (r, scale) = eval_one(&cfg, &pred, &gt, Some(&dir), None)?;
            scales.push(scale);
            scenes.push((name, r));
        }
    } else {
        let gt = io::read_gt_tracks(&a.gt)?;
        let pred = io::read_predictions(&a.pred)?;
        let (r, scale) = eval_one(&cfg, &pred, &gt, a.scene.as_deref(), a.threshold_scale)?;
        inputs.extend(a.scene.iter().cloned());
        scales.push(scale);
        scenes.push((a.scene.as_deref().map_or_else(|| scene_name(&a.gt), scene_name), r));
    }
    if scenes.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    // report thresholds in scene units when every scene shares a scale
    let shown = if scales.windows(2).all(|w| w[0] == w[1]) { scales[0] } else { 1.0 };
    let report = MetricsReport::from_scenes(&cfg.scaled_thresholds(shown), scenes);
    report.write_json(&a.out)?;
    let mut outputs = vec![a.out.clone()];
    if let Some(c) = &a.csv {
        report.write_csv(c)?;
        outputs.push(c.clone());
    }
    Ok(Run {
        command: "eval",
        config: to_value(&cfg),
        seed: 0,
        inputs,
        outputs,
        timings: BTreeMap::new(),
        manifest: manifest_path(&a.out),
    })
}

/// Throughput of one tracking pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub frames: usize,
    pub views: usize,
    pub tracks: usize,
    pub windows: usize,
    /// Median over repeats of fusion + encoding + refinement, seconds. Loading is excluded.
    pub wall_time: f64,
    /// Frames covered by all windows, counting overlaps twice.
    pub window_frames: usize,
    /// Window frames per second.
    pub raw_fps: f64,
    /// Distinct frames per second: every frame is refined in two overlapping windows.
    pub effective_fps: f64,
    pub load_time: f64,
    pub timed_regions: Vec<String>,
}

/// Time tracking of an already loaded video.
pub fn bench_video(tracker: &crate::tracker::Tracker, store: &crate::tensor::ParamStore, video: &Video, queries: &[io::QueryRow], repeat: usize) -> Result<BenchReport> {
    let mut times = Vec::with_capacity(repeat.max(1));
    for _ in 0..repeat.max(1) {
        let t0 = Instant::now();
        let prepared = PreparedVideo::new(video, tracker.config.encoder.levels)?;
        tracker.track_prepared(store, video, &prepared, queries)?;
        times.push(secs(t0));
    }
    let wall_time = metrics::median(&times).unwrap_or(0.0);
    let n = video.n_frames();
    let windows = window_ranges(n, tracker.config.window);
    let window_frames: usize = windows.iter().map(|&(s, e)| e - s).sum();
    Ok(BenchReport {
        frames: n,
        views: video.n_views(),
        tracks: queries.len(),
        windows: windows.len(),
        wall_time,
        window_frames,
        raw_fps: window_frames as f64 / wall_time.max(f64::MIN_POSITIVE),
        effective_fps: n as f64 / wall_time.max(f64::MIN_POSITIVE),
        load_time: 0.0,
        timed_regions: vec!["point cloud fusion".into(), "feature encoding".into(), "windowed refinement".into()],
    })
}

fn cmd_bench(a: &BenchArgs) -> Result<Run> {
    let (tracker, store) = load_model(&a.checkpoint)?;
    let t0 = Instant::now();
    let mut video = load_video(&a.scene, &a.depth_source, None, 0.0, 0)?;
    let mut queries = io::read_queries(&a.scene.join("queries.csv"))?;
    if let Some(n) = a.frames {
        if n == 0 || n > video.n_frames() {
            return Err(Error::invalid(format!("--frames must be in 1..={}", video.n_frames())));
        }
        video = video.truncated(n);
        queries.retain(|q| q.t_q < n);
    }
    let load = secs(t0);
    let mut report = bench_video(&tracker, &store, &video, &queries, a.repeat)?;
    report.load_time = load;
    io::write_json(&a.out, &report)?;
    println!(
        "{} frames x {} views, {} tracks: {:.3} s, effective {:.2} FPS ({:.2} window-frames/s)",
        report.frames, report.views, report.tracks, report.wall_time, report.effective_fps, report.raw_fps
    );
    let mut timings = BTreeMap::new();
    timings.insert("load".into(), load);
    timings.insert("track".into(), report.wall_time);
    Ok(Run {
        command: "bench",
        config: to_value(&tracker.config),
        seed: 0,
        inputs: vec![a.scene.clone(), a.checkpoint.clone()],
        outputs: vec![a.out.clone()],
        timings,
        manifest: manifest_path(&a.out),
    })
}

/// Continue a log file across resumes; kept for callers that manage logs directly.
pub fn read_train_log(checkpoint: &Path) -> Result<Vec<crate::training::StepLog>> {
    read_log(&log_path(checkpoint))
}
