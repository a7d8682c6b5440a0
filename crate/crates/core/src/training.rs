//! Losses, augmentation and the unrolled multi-window training loop.

use std::path::{Path, PathBuf};

use nalgebra::{Rotation3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Similarity;
use crate::io::{self, GtRow, QueryRow};
use crate::metrics::{evaluate_scene, EvalConfig, MetricsReport};
use crate::scenesim::SimScene;
use crate::tensor::{clip_grad_norm, read_checkpoint, write_checkpoint, AdamW, AdamWConfig, ParamStore, Real, Tape, Tensor, Var};
use crate::tracker::{load_model, save_model, Forward, PreparedVideo, Tracker, TrackerConfig, Video};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_vis: f64,
    /// Weight `gamma^(M - m)` of iteration `m`.
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_vis: 1.0,
            gamma: 0.8,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::invalid(format!("gamma must be in (0, 1], got {}", self.gamma)));
        }
        if !(self.lambda_vis >= 0.0 && self.lambda_vis.is_finite()) {
            return Err(Error::invalid("lambda_vis must be >= 0"));
        }
        Ok(())
    }
}

/// Iteration-weighted L1 position loss.
///
/// `pred` is `[J, M, N, T, 3]`, `gt` is `[J, N, T, 3]` and `mask` is
/// `[J, N, T]`, all flattened row-major. The sum is divided by the number of
/// unmasked `(j, m, n, t)` terms; an all-masked batch gives 0.
pub fn loss_xyz(pred: &[f64], gt: &[f64], mask: &[bool], dims: [usize; 4], gamma: f64) -> Result<f64> {
    let [j, m, n, t] = dims;
    if pred.len() != j * m * n * t * 3 || gt.len() != j * n * t * 3 || mask.len() != j * n * t {
        return Err(Error::invalid(format!(
            "loss_xyz shapes: pred {}, gt {}, mask {} for dims {dims:?}",
            pred.len(),
            gt.len(),
            mask.len()
        )));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for jj in 0..j {
        for mm in 0..m {
            let w = gamma.powi((m - 1 - mm) as i32);
            for k in 0..n * t {
                let slot = jj * n * t + k;
                if !mask[slot] {
                    continue;
                }
                let p = &pred[((jj * m + mm) * n * t + k) * 3..][..3];
                let g = &gt[slot * 3..][..3];
                sum += w * (0..3).map(|c| (p[c] - g[c]).abs()).sum::<f64>();
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Class weights `(w0, w1)` making both classes contribute equally.
pub fn balance_weights(targets: &[bool], mask: &[bool]) -> (f64, f64) {
    let n1 = targets.iter().zip(mask).filter(|(&y, &m)| m && y).count();
    let n0 = targets.iter().zip(mask).filter(|(&y, &m)| m && !y).count();
    let count = (n0 + n1) as f64;
    match (n0, n1) {
        (0, _) | (_, 0) => (1.0, 1.0),
        _ => (count / (2.0 * n0 as f64), count / (2.0 * n1 as f64)),
    }
}

/// Balanced binary cross-entropy over unmasked entries.
pub fn loss_vis(logits: &[f64], targets: &[bool], mask: &[bool]) -> Result<f64> {
    if logits.len() != targets.len() || mask.len() != targets.len() {
        return Err(Error::invalid("loss_vis: logits, targets and mask lengths differ"));
    }
    let (w0, w1) = balance_weights(targets, mask);
    let (mut sum, mut count) = (0.0, 0usize);
    for ((&x, &y), &m) in logits.iter().zip(targets).zip(mask) {
        if !m {
            continue;
        }
        let yv = if y { 1.0 } else { 0.0 };
        let bce = x.max(0.0) - x * yv + (-x.abs()).exp().ln_1p();
        sum += if y { w1 } else { w0 } * bce;
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Ground truth aligned with a query list, `[track][frame]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub positions: Vec<Vec<[f64; 3]>>,
    pub visible: Vec<Vec<bool>>,
}

impl GroundTruth {
    /// Align GT rows to `queries`; every query needs a full track.
    pub fn from_rows(rows: &[GtRow], queries: &[QueryRow], n_frames: usize) -> Result<Self> {
        let mut by_id = std::collections::HashMap::new();
        for (i, q) in queries.iter().enumerate() {
            by_id.insert(q.track_id, i);
        }
        let mut positions = vec![vec![[f64::NAN; 3]; n_frames]; queries.len()];
        let mut visible = vec![vec![false; n_frames]; queries.len()];
        let mut seen = vec![vec![false; n_frames]; queries.len()];
        for r in rows {
            let Some(&i) = by_id.get(&r.track_id) else { continue };
            if r.t >= n_frames {
                return Err(Error::invalid(format!("GT track {} has frame {} beyond {n_frames}", r.track_id, r.t)));
            }
            positions[i][r.t] = r.xyz;
            visible[i][r.t] = r.visible;
            seen[i][r.t] = true;
        }
        let missing: Vec<String> = queries
            .iter()
            .zip(&seen)
            .filter(|(q, s)| s[q.t_q..].iter().any(|&x| !x))
            .map(|(q, _)| q.track_id.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::invalid(format!("GT missing frames for tracks {}", missing.join(", "))));
        }
        Ok(Self { positions, visible })
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            positions: idx.iter().map(|&i| self.positions[i].clone()).collect(),
            visible: idx.iter().map(|&i| self.visible[i].clone()).collect(),
        }
    }
}

/// One training scene held in memory.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub name: String,
    pub video: Video,
    pub queries: Vec<QueryRow>,
    pub gt: GroundTruth,
}

impl TrainSample {
    pub fn from_sim(sim: &SimScene) -> Result<Self> {
        let video = Video::from_sim(sim)?;
        let queries = sim.query_rows();
        let gt = GroundTruth::from_rows(&sim.gt_rows(), &queries, video.n_frames())?;
        Ok(Self {
            name: format!("scene_{:04}", sim.scene_id),
            video,
            queries,
            gt,
        })
    }

    /// Load a scene directory with `queries.csv` and `gt_tracks.csv`.
    pub fn load(dir: &Path, depth_subdir: &str) -> Result<Self> {
        let scene = io::load_scene(dir, depth_subdir)?;
        let queries = io::read_queries(&dir.join("queries.csv"))?;
        let rows = io::read_gt_tracks(&dir.join("gt_tracks.csv"))?;
        let gt = GroundTruth::from_rows(&rows, &queries, scene.n_frames())?;
        Ok(Self {
            name: dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            video: Video::from_scene(&scene),
            queries,
            gt,
        })
    }

    /// Ground truth as CSV rows, frames `t >= t_q` only.
    pub fn gt_rows(&self) -> Vec<GtRow> {
        let mut out = Vec::new();
        for (i, q) in self.queries.iter().enumerate() {
            for t in q.t_q..self.video.n_frames() {
                out.push(GtRow {
                    track_id: q.track_id,
                    t,
                    xyz: self.gt.positions[i][t],
                    visible: self.gt.visible[i][t],
                });
            }
        }
        out
    }

    /// Keep only the tracks at `idx`.
    pub fn with_tracks(&self, idx: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            video: self.video.clone(),
            queries: idx.iter().map(|&i| self.queries[i].clone()).collect(),
            gt: self.gt.subset(idx),
        }
    }

    /// Apply a world similarity to everything geometric.
    pub fn transformed(&self, s: &Similarity) -> Result<Self> {
        let map = |p: [f64; 3]| {
            let x = s.apply(&Vector3::new(p[0], p[1], p[2]));
            [x.x, x.y, x.z]
        };
        Ok(Self {
            name: self.name.clone(),
            video: self.video.transformed(s)?,
            queries: self
                .queries
                .iter()
                .map(|q| QueryRow {
                    track_id: q.track_id,
                    t_q: q.t_q,
                    xyz: map(q.xyz),
                })
                .collect(),
            gt: GroundTruth {
                positions: self.gt.positions.iter().map(|tr| tr.iter().map(|&p| map(p)).collect()).collect(),
                visible: self.gt.visible.clone(),
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Randomly keep between `min_views` and all views.
    pub view_drop: bool,
    pub min_views: usize,
    /// Standard deviation of additive depth noise, world units.
    pub depth_noise: f64,
    /// Random yaw, translation and scale of the whole world.
    pub similarity: bool,
    pub max_translation: f64,
    pub max_log_scale: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            view_drop: true,
            min_views: 1,
            depth_noise: 0.0,
            similarity: true,
            max_translation: 0.2,
            max_log_scale: 0.2,
        }
    }
}

impl AugmentConfig {
    /// No augmentation at all.
    pub fn none() -> Self {
        Self {
            view_drop: false,
            min_views: 1,
            depth_noise: 0.0,
            similarity: false,
            max_translation: 0.0,
            max_log_scale: 0.0,
        }
    }
}

/// Add i.i.d. Gaussian noise to every valid depth of `video`.
pub fn add_depth_noise(video: &mut Video, sigma: f64, rng: &mut impl Rng) -> Result<()> {
    if sigma == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(format!("depth noise: {e}")))?;
    for view in &mut video.depth {
        for d in view {
            for z in &mut d.data {
                if z.is_finite() && *z > 0.0 {
                    let noisy = *z as f64 + normal.sample(rng);
                    // keep the pixel valid; a non-positive depth would silently drop it
                    *z = noisy.max(1e-3) as f32;
                }
            }
        }
    }
    Ok(())
}

/// Randomly drop views, add depth noise and move the world; labels follow the world move.
pub fn augment_sample(sample: &TrainSample, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<TrainSample> {
    let mut out = if cfg.view_drop && sample.video.n_views() > 1 {
        let avail = sample.video.n_views();
        let keep = rng.random_range(cfg.min_views.clamp(1, avail)..=avail);
        let mut views: Vec<usize> = (0..avail).collect();
        views.shuffle(rng);
        views.truncate(keep);
        views.sort_unstable();
        TrainSample {
            video: sample.video.select_views(&views)?,
            ..sample.clone()
        }
    } else {
        sample.clone()
    };
    add_depth_noise(&mut out.video, cfg.depth_noise, rng)?;
    if cfg.similarity {
        let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let tr = cfg.max_translation;
        let t = Vector3::new(rng.random_range(-tr..=tr), rng.random_range(-tr..=tr), 0.0);
        let ls = cfg.max_log_scale;
        let scale = rng.random_range(-ls..=ls).exp();
        let s = Similarity {
            scale,
            rotation: Rotation3::from_axis_angle(&Vector3::z_axis(), yaw),
            translation: t,
        };
        out = out.transformed(&s)?;
    }
    Ok(out)
}

/// Differentiable losses of one forward pass.
pub struct TapeLosses {
    pub total: Var,
    pub xyz: Var,
    pub vis: Var,
}

/// Build both losses from the window traces of a forward pass.
pub fn losses_on_tape<T: Real>(
    tape: &mut Tape<T>,
    fwd: &Forward,
    queries: &[QueryRow],
    gt: &GroundTruth,
    cfg: &LossConfig,
) -> Result<TapeLosses> {
    let mut xyz_terms = Vec::new();
    let mut count = 0usize;
    let mut vis_parts = Vec::new();
    let mut vis_targets = Vec::new();
    let mut vis_mask = Vec::new();
    for tr in &fwd.traces {
        let rows: Vec<(usize, usize)> = tr.tracks.iter().flat_map(|&n| (tr.start..tr.end).map(move |t| (n, t))).collect();
        let mask: Vec<bool> = rows.iter().map(|&(n, t)| t >= queries[n].t_q).collect();
        let gt_flat: Vec<f64> = rows.iter().flat_map(|&(n, t)| gt.positions[n][t]).collect();
        if gt_flat.iter().zip(mask.iter().flat_map(|&m| [m; 3])).any(|(v, m)| m && !v.is_finite()) {
            return Err(Error::invalid("ground truth missing for a supervised frame"));
        }
        let gt_flat: Vec<f64> = gt_flat.iter().map(|v| if v.is_finite() { *v } else { 0.0 }).collect();
        let gtv = tape.constant(Tensor::from_f64(&[rows.len(), 3], &gt_flat)?);
        let m_total = tr.positions.len();
        let unmasked = mask.iter().filter(|&&m| m).count();
        for (mi, &p) in tr.positions.iter().enumerate() {
            let w = cfg.gamma.powi((m_total - 1 - mi) as i32);
            let wt: Vec<f64> = mask.iter().flat_map(|&m| [if m { w } else { 0.0 }; 3]).collect();
            let wt = tape.constant(Tensor::from_f64(&[rows.len(), 3], &wt)?);
            let diff = tape.sub(p, gtv)?;
            let diff = tape.abs(diff)?;
            let diff = tape.mul(diff, wt)?;
            xyz_terms.push(tape.sum(diff)?);
            count += unmasked;
        }
        vis_parts.push(tape.reshape(tr.logits, &[rows.len()])?);
        vis_targets.extend(rows.iter().map(|&(n, t)| gt.visible[n][t]));
        vis_mask.extend(mask);
    }
    let zero = || Tensor::scalar(T::zero());
    let xyz = if xyz_terms.is_empty() {
        tape.constant(zero())
    } else {
        let s = sum_scalars(tape, &xyz_terms)?;
        tape.scale(s, 1.0 / count.max(1) as f64)?
    };
    let vis = if vis_parts.is_empty() {
        tape.constant(zero())
    } else {
        let logits = tape.concat_rows(&vis_parts)?;
        let targets: Vec<T> = vis_targets.iter().map(|&y| if y { T::one() } else { T::zero() }).collect();
        let bce = tape.bce_with_logits(logits, &targets)?;
        let (w0, w1) = balance_weights(&vis_targets, &vis_mask);
        let w: Vec<f64> = vis_targets
            .iter()
            .zip(&vis_mask)
            .map(|(&y, &m)| if !m { 0.0 } else if y { w1 } else { w0 })
            .collect();
        let n = w.len();
        let wv = tape.constant(Tensor::from_f64(&[n], &w)?);
        let weighted = tape.mul(bce, wv)?;
        let s = tape.sum(weighted)?;
        let c = vis_mask.iter().filter(|&&m| m).count().max(1);
        tape.scale(s, 1.0 / c as f64)?
    };
    let v = tape.scale(vis, cfg.lambda_vis)?;
    let total = tape.add(xyz, v)?;
    Ok(TapeLosses { total, xyz, vis })
}

fn sum_scalars<T: Real>(tape: &mut Tape<T>, parts: &[Var]) -> Result<Var> {
    let parts: Vec<Var> = parts.iter().map(|&p| tape.reshape(p, &[1])).collect::<Result<_, _>>()?;
    let cat = tape.concat_rows(&parts)?;
    Ok(tape.sum(cat)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear warmup then cosine decay to `min_lr_ratio * lr`.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: TrackerConfig,
    pub optimizer: AdamWConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub steps: u64,
    pub warmup: u64,
    pub schedule: LrSchedule,
    pub min_lr_ratio: f64,
    pub grad_clip: f64,
    /// Tracks per step; scenes with more are subsampled.
    pub max_tracks: usize,
    pub seed: u64,
    pub log_every: u64,
    pub checkpoint_every: u64,
    /// Depth directory inside each scene.
    pub depth_source: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: TrackerConfig::default(),
            optimizer: AdamWConfig::default(),
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            steps: 2000,
            warmup: 100,
            schedule: LrSchedule::Cosine,
            min_lr_ratio: 0.05,
            grad_clip: 1.0,
            max_tracks: 64,
            seed: 0,
            log_every: 1,
            checkpoint_every: 500,
            depth_source: "depth".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.max_tracks == 0 {
            return Err(Error::invalid("max_tracks must be >= 1"));
        }
        if !(self.optimizer.lr > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::invalid("lr and grad_clip must be positive"));
        }
        if self.augment.depth_noise < 0.0 {
            return Err(Error::invalid("depth_noise must be >= 0"));
        }
        Ok(())
    }

    /// Learning rate for 0-based step `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let base = self.optimizer.lr;
        if step < self.warmup {
            return base * (step + 1) as f64 / self.warmup as f64;
        }
        match self.schedule {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let span = self.steps.saturating_sub(self.warmup).max(1) as f64;
                let x = ((step - self.warmup) as f64 / span).min(1.0);
                let lo = base * self.min_lr_ratio;
                lo + (base - lo) * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
            }
        }
    }
}

/// Loss values of one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub loss_xyz: f64,
    pub loss_vis: f64,
}

pub const LOG_HEADER: [&str; 4] = ["step", "loss", "loss_xyz", "loss_vis"];

pub fn write_log(path: &Path, rows: &[StepLog]) -> Result<()> {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.step.to_string(), r.loss.to_string(), r.loss_xyz.to_string(), r.loss_vis.to_string()])
        .collect();
    Ok(io::write_table(path, &LOG_HEADER, &rows)?)
}

pub fn read_log(path: &Path) -> Result<Vec<StepLog>> {
    let rows = io::read_table(path, &LOG_HEADER)?;
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::invalid(format!("{}: bad number `{s}` on line {}", path.display(), i + 2)));
            Ok(StepLog {
                step: r[0].parse().map_err(|_| Error::invalid(format!("{}: bad step on line {}", path.display(), i + 2)))?,
                loss: num(&r[1])?,
                loss_xyz: num(&r[2])?,
                loss_vis: num(&r[3])?,
            })
        })
        .collect()
}

/// Path of the optimizer state next to a checkpoint.
pub fn optimizer_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".opt");
    s.into()
}

/// Model, optimizer and data for one training run.
pub struct Trainer {
    pub config: TrainConfig,
    pub tracker: Tracker,
    pub store: ParamStore,
    pub optim: AdamW,
    pub samples: Vec<TrainSample>,
    /// Cached clouds of the un-augmented samples.
    prepared: Vec<Option<PreparedVideo>>,
    pub log: Vec<StepLog>,
}

impl Trainer {
    pub fn new(config: TrainConfig, samples: Vec<TrainSample>) -> Result<Self> {
        config.validate()?;
        if samples.is_empty() {
            return Err(Error::invalid("training needs at least one scene"));
        }
        let mut store = ParamStore::new();
        let mut rng = stream_rng(config.seed, u64::MAX);
        let tracker = Tracker::new(&config.model, &mut store, &mut rng)?;
        let optim = AdamW::new(config.optimizer.clone(), &store);
        let prepared = vec![None; samples.len()];
        Ok(Self {
            config,
            tracker,
            store,
            optim,
            samples,
            prepared,
            log: Vec::new(),
        })
    }

    /// Continue from a checkpoint, its optimizer sidecar and (if present) the log.
    pub fn resume(config: TrainConfig, samples: Vec<TrainSample>, checkpoint: &Path, log: Option<&Path>) -> Result<Self> {
        let mut t = Self::new(config, samples)?;
        let (tracker, store) = load_model(checkpoint)?;
        if tracker.config != t.config.model {
            return Err(Error::invalid("checkpoint model config differs from the training config"));
        }
        let state = read_checkpoint(&optimizer_path(checkpoint))?;
        t.optim = AdamW::restore(t.config.optimizer.clone(), &store, &state)?;
        t.tracker = tracker;
        t.store = store;
        let step = t.optim.step_count();
        if let Some(p) = log.filter(|p| p.exists()) {
            t.log = read_log(p)?.into_iter().filter(|r| r.step < step).collect();
        }
        Ok(t)
    }

    pub fn step(&self) -> u64 {
        self.optim.step_count()
    }

    pub fn save(&self, checkpoint: &Path) -> Result<()> {
        save_model(checkpoint, &self.tracker, &self.store)?;
        write_checkpoint(&optimizer_path(checkpoint), &self.optim.state_store(&self.store)?)?;
        Ok(())
    }

    /// Scene index used at `step`: a fresh permutation every epoch.
    pub fn scene_for_step(&self, step: u64) -> usize {
        let n = self.samples.len() as u64;
        let epoch = step / n;
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut stream_rng(self.config.seed, (1 << 40) | epoch));
        order[(step % n) as usize]
    }

    fn prepared(&mut self, i: usize) -> Result<PreparedVideo> {
        if self.prepared[i].is_none() {
            self.prepared[i] = Some(PreparedVideo::new(&self.samples[i].video, self.config.model.encoder.levels)?);
        }
        Ok(self.prepared[i].clone().expect("just built"))
    }

    /// The sample seen at `step`, after track subsampling and augmentation.
    pub fn sample_for_step(&mut self, step: u64) -> Result<(TrainSample, PreparedVideo)> {
        let i = self.scene_for_step(step);
        let mut rng = stream_rng(self.config.seed, step);
        let base = &self.samples[i];
        let n = base.queries.len();
        let sample = if n > self.config.max_tracks {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            idx.truncate(self.config.max_tracks);
            idx.sort_unstable();
            base.with_tracks(&idx)
        } else {
            base.clone()
        };
        let a = &self.config.augment;
        let plain = !a.view_drop && a.depth_noise == 0.0 && !a.similarity;
        if plain {
            let p = self.prepared(i)?;
            return Ok((sample, p));
        }
        let aug = augment_sample(&sample, a, &mut rng)?;
        let p = PreparedVideo::new(&aug.video, self.config.model.encoder.levels)?;
        Ok((aug, p))
    }

    /// Metrics of the current weights on every training scene, without augmentation.
    pub fn evaluate(&mut self, eval: &EvalConfig, threshold_scale: f64) -> Result<MetricsReport> {
        let mut scenes = Vec::with_capacity(self.samples.len());
        for i in 0..self.samples.len() {
            let prepared = self.prepared(i)?;
            let s = &self.samples[i];
            let fwd = self.tracker.track_prepared(&self.store, &s.video, &prepared, &s.queries)?;
            let pred = fwd.rows(&s.queries, eval.vis_threshold);
            scenes.push((s.name.clone(), evaluate_scene(&pred, &s.gt_rows(), eval, threshold_scale)?));
        }
        Ok(MetricsReport::from_scenes(&eval.scaled_thresholds(threshold_scale), scenes))
    }

    /// Forward all windows, one backward pass, one optimizer step.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let step = self.step();
        let (sample, prepared) = self.sample_for_step(step)?;
        let mut tape = Tape::<f32>::new();
        let levels = self.tracker.encode_video(&mut tape, &self.store, &sample.video)?;
        let fwd = self
            .tracker
            .forward_windows(&mut tape, &self.store, &levels, &prepared, &sample.queries)
            .map_err(|e| match e {
                Error::Divergence(m) => Error::Divergence(format!("step {step}: {m}")),
                e => e,
            })?;
        let l = losses_on_tape(&mut tape, &fwd, &sample.queries, &sample.gt, &self.config.loss)?;
        let log = StepLog {
            step,
            loss: tape.value(l.total).item().as_f64(),
            loss_xyz: tape.value(l.xyz).item().as_f64(),
            loss_vis: tape.value(l.vis).item().as_f64(),
        };
        if !log.loss.is_finite() {
            return Err(Error::Divergence(format!("step {step}: loss is {}", log.loss)));
        }
        let grads = tape.backward(l.total)?;
        self.store.zero_grad();
        self.store.accumulate(&tape, &grads);
        self.store.fill_missing_grads();
        let norm = clip_grad_norm(&mut self.store, self.config.grad_clip);
        if !norm.is_finite() {
            return Err(Error::Divergence(format!("step {step}: gradient norm is {norm}")));
        }
        let lr = self.config.lr_at(step);
        self.optim.step_with_lr(&mut self.store, lr)?;
        if self.store.iter().any(|p| !p.value.is_finite()) {
            return Err(Error::Divergence(format!("step {step}: parameters became non-finite")));
        }
        self.log.push(log);
        Ok(log)
    }

    /// Train until `config.steps`, saving to `checkpoint` every `checkpoint_every`
    /// steps and at the end. `on_step` may stop early by returning `false`.
    pub fn run(
        &mut self,
        checkpoint: Option<&Path>,
        log_path: Option<&Path>,
        mut on_step: impl FnMut(&mut Trainer, &StepLog) -> Result<bool>,
    ) -> Result<()> {
        while self.step() < self.config.steps {
            let log = self.train_step()?;
            let done = self.step();
            let keep_going = on_step(self, &log)?;
            let every = self.config.checkpoint_every;
            if let Some(c) = checkpoint {
                if (every > 0 && done.is_multiple_of(every)) || done == self.config.steps || !keep_going {
                    self.save(c)?;
                }
            }
            if let Some(p) = log_path {
                if done.is_multiple_of(self.config.log_every.max(1)) || done == self.config.steps || !keep_going {
                    write_log(p, &self.log)?;
                }
            }
            if !keep_going {
                break;
            }
        }
        Ok(())
    }
}

/// RNG for stream `stream` of run seed `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}
