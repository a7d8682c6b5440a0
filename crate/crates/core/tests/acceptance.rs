//! End-to-end acceptance checks, one line per criterion.
//!
//! Runs as a plain binary: `cargo test --test acceptance [-- 1 5 7]` to pick criteria.
//! `MVTRACK_OVERFIT_CKPT=path` reuses (or stores) the overfit checkpoint shared by 7, 9, 10 and 12.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use mvtrack::fusion::{cell_pixel, fuse_geometry, knn_brute_force, level_stride, CloudGeometry, FusedPointCloud, PointTag, ViewInput};
use mvtrack::geometry::{intrinsics, look_at, Camera, DepthMap, Similarity, Vec3};
use mvtrack::io;
use mvtrack::metrics::{self, evaluate_scene, evaluate_track, EvalConfig, TrackSeries};
use mvtrack::scenesim::{generate_dataset, generate_scene, SimConfig, SimScene};
use mvtrack::tensor::{self, ParamStore, Tensor};
use mvtrack::tracker::{self, Tracker, TrackerConfig, Video};
use mvtrack::training::{add_depth_noise, loss_vis, loss_xyz, stream_rng, AugmentConfig, TrainConfig, TrainSample, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Overfit fixture: 8 scenes, 4 views, 24 frames, 32 tracks.
struct Fixture {
    sim: SimConfig,
    samples: Vec<TrainSample>,
    scenes: Vec<SimScene>,
    tracker: Tracker,
    store: ParamStore,
    note: String,
}

const OVERFIT_MAX_STEPS: u64 = 5000;
const OVERFIT_LR: f64 = 1e-3;
const EVAL_EVERY: u64 = 100;
const NOISE_UNIT: f64 = 0.01;

fn fixture_sim() -> SimConfig {
    SimConfig {
        n_scenes: 8,
        n_views: 4,
        n_frames: 24,
        n_tracks: 32,
        ..SimConfig::default()
    }
}

fn overfit_config() -> TrainConfig {
    let mut model = TrackerConfig::toy();
    model.window = 12;
    model.iterations = 4;
    let mut cfg = TrainConfig {
        model,
        augment: AugmentConfig::none(),
        steps: OVERFIT_MAX_STEPS,
        warmup: 50,
        seed: 0,
        ..TrainConfig::default()
    };
    cfg.optimizer.lr = OVERFIT_LR;
    cfg
}

struct Targets {
    mte: f64,
    delta_avg: f64,
    aj: f64,
}

impl Targets {
    fn met(&self) -> bool {
        self.mte < 0.02 && self.delta_avg > 0.9 && self.aj > 0.8
    }
}

fn train_fixture() -> (Fixture, Option<(u64, Targets)>) {
    let sim = fixture_sim();
    let scenes: Vec<SimScene> = (0..sim.n_scenes).map(|i| generate_scene(&sim, i).unwrap()).collect();
    let samples: Vec<TrainSample> = scenes.iter().map(|s| TrainSample::from_sim(s).unwrap()).collect();
    let cached = std::env::var_os("MVTRACK_OVERFIT_CKPT").map(PathBuf::from);
    if let Some(path) = cached.as_ref().filter(|p| p.exists()) {
        let (tracker, store) = tracker::load_model(path).unwrap();
        let fx = Fixture {
            sim,
            samples,
            scenes,
            tracker,
            store,
            note: format!("reused {}", path.display()),
        };
        return (fx, None);
    }
    let eval = EvalConfig::default();
    let mut trainer = Trainer::new(overfit_config(), samples.clone()).unwrap();
    let t0 = Instant::now();
    let mut last = None;
    while trainer.step() < OVERFIT_MAX_STEPS {
        trainer.train_step().unwrap();
        let step = trainer.step();
        if step.is_multiple_of(EVAL_EVERY) || step == OVERFIT_MAX_STEPS {
            let a = trainer.evaluate(&eval, sim.threshold_scale).unwrap().aggregates;
            let t = Targets {
                mte: a.mte.unwrap_or(f64::INFINITY),
                delta_avg: a.delta_avg.unwrap_or(0.0),
                aj: a.aj.unwrap_or(0.0),
            };
            eprintln!(
                "  overfit step {step:>4} ({:.0} s): MTE {:.4} delta_avg {:.3} AJ {:.3}",
                t0.elapsed().as_secs_f64(),
                t.mte,
                t.delta_avg,
                t.aj
            );
            let met = t.met();
            last = Some((step, t));
            if met {
                break;
            }
        }
    }
    if let Some(path) = &cached {
        tracker::save_model(path, &trainer.tracker, &trainer.store).unwrap();
    }
    let fx = Fixture {
        sim,
        samples,
        scenes,
        tracker: trainer.tracker,
        store: trainer.store,
        note: format!("trained {} steps in {:.0} s", last.as_ref().map_or(0, |l| l.0), t0.elapsed().as_secs_f64()),
    };
    (fx, last)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

fn random_camera(r: &mut ChaCha8Rng, id: u32) -> Camera {
    let w = r.random_range(16..1024usize);
    let h = r.random_range(16..1024usize);
    let f = r.random_range(0.5..2.0) * w as f64;
    let k = intrinsics(f, f * r.random_range(0.9..1.1), w as f64 * r.random_range(0.4..0.6), h as f64 * r.random_range(0.4..0.6));
    let eye = Vec3::new(r.random_range(-5.0..5.0), r.random_range(-5.0..5.0), r.random_range(-5.0..5.0));
    let target = eye + Vec3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(0.2..1.0));
    Camera::new(id, k, look_at(eye, target, Vec3::new(0.0, 0.0, 1.0)), w, h).unwrap()
}

fn c1_geometry() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    for i in 0..10_000u32 {
        let cam = random_camera(&mut r, i);
        let u = r.random_range(-0.5..cam.width as f64 - 0.5);
        let v = r.random_range(-0.5..cam.height as f64 - 0.5);
        let z = r.random_range(0.05..20.0);
        let x = cam.unproject_pixel(u, v, z).unwrap();
        match cam.project_point(&x) {
            mvtrack::geometry::Projection::Visible { pixel, depth, .. } => {
                worst = worst.max(rel(pixel[0], u)).max(rel(pixel[1], v)).max(rel(depth, z));
            }
            _ => worst = f64::INFINITY,
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(worst < 1e-5 && secs < 1.0, format!("max relative error {worst:.2e} over 1e4 cameras in {secs:.3} s"))
}

fn c2_knn() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let t0 = Instant::now();
    let (mut mismatches, mut queries) = (0usize, 0usize);
    for c in 0..100 {
        let n = if c < 10 { r.random_range(1..64) } else { r.random_range(64..=10_000) };
        let clustered = c % 3 == 0;
        let mut pts: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                let s = if clustered { 0.05 } else { 2.0 };
                [r.random_range(-s..s), r.random_range(-s..s), r.random_range(-s..s)]
            })
            .collect();
        // exact duplicates exercise the tie-break
        for i in 0..n / 20 {
            pts[i * 7 % n] = pts[i];
        }
        let tags: Vec<PointTag> = (0..n as u32).map(|i| PointTag { view: 0, row: i, col: 0 }).collect();
        let geom = CloudGeometry::new(pts.clone(), tags, (0..n).collect()).unwrap();
        let cloud = FusedPointCloud::from_geometry(geom, &Tensor::<f32>::zeros(&[n, 1])).unwrap();
        for qi in 0..20 {
            let k = r.random_range(1..=32usize);
            let q = if qi % 4 == 0 {
                pts[r.random_range(0..n)]
            } else {
                [r.random_range(-3.0..3.0), r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)]
            };
            let got = cloud.knn_query(&q, k).unwrap();
            let want = knn_brute_force(&pts, &q, k);
            queries += 1;
            if got.len() != want.len() || got.iter().zip(&want).any(|(a, b)| a.index != b.index || a.distance.to_bits() != b.distance.to_bits()) {
                mismatches += 1;
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        mismatches == 0 && secs < 30.0,
        format!("{mismatches} mismatches over {queries} queries on 100 clouds in {secs:.2} s"),
    )
}

fn c3_fusion(fx: &Fixture) -> Outcome {
    let levels = fx.tracker.config.encoder.levels;
    let (mut clouds, mut bad) = (0usize, Vec::new());
    let mut worst = 0.0f64;
    let shift = Similarity::translation(Vec3::new(0.37, -1.25, 0.8));
    for (si, s) in fx.samples.iter().enumerate() {
        let video = &s.video;
        let moved = video.transformed(&shift).unwrap();
        let (h, w) = video.size();
        for t in 0..video.n_frames() {
            for lv in 0..levels {
                let stride = level_stride(lv);
                let (gh, gw) = (h / stride, w / stride);
                let inputs = |v: &Video| -> Vec<(Camera, DepthMap)> {
                    (0..v.n_views()).map(|k| (v.cameras[k].at(t).clone(), v.depth[k][t].clone())).collect()
                };
                let plain = inputs(video);
                let shifted = inputs(&moved);
                let views = |vs: &[(Camera, DepthMap)]| -> CloudGeometry {
                    let vi: Vec<ViewInput> = vs
                        .iter()
                        .map(|(c, d)| ViewInput {
                            camera: c,
                            depth: d,
                            feature_base: 0,
                        })
                        .collect();
                    fuse_geometry(&vi, gh, gw).unwrap()
                };
                let a = views(&plain);
                let b = views(&shifted);
                let expected: usize = plain
                    .iter()
                    .map(|(_, d)| {
                        let mut n = 0;
                        for r in 0..gh {
                            for c in 0..gw {
                                let z = d.data[cell_pixel(r, stride) * d.width + cell_pixel(c, stride)];
                                n += (z.is_finite() && z > 0.0) as usize;
                            }
                        }
                        n
                    })
                    .sum();
                clouds += 1;
                if a.len() != expected || b.len() != expected {
                    bad.push(format!("scene {si} frame {t} level {lv}: {} vs {expected}", a.len()));
                    continue;
                }
                for (p, q) in a.positions.iter().zip(&b.positions) {
                    let moved = shift.apply(&Vec3::new(p[0], p[1], p[2]));
                    worst = worst.max((moved - Vec3::new(q[0], q[1], q[2])).norm());
                }
            }
        }
    }
    outcome(
        bad.is_empty() && worst < 1e-5,
        format!(
            "count law on {clouds} clouds ({} violations), translated cloud error {worst:.2e}{}",
            bad.len(),
            bad.first().map(|b| format!("; first: {b}")).unwrap_or_default()
        ),
    )
}

fn c4_gradients() -> Outcome {
    let errs = common::primitive_fd_errors();
    let (name, prim) = errs.iter().fold(("", 0.0f64), |acc, &(n, e)| if e > acc.1 || e.is_nan() { (n, e) } else { acc });
    let (full, checked) = common::full_loss_fd_error();
    outcome(
        prim < 1e-3 && full < 1e-3,
        format!("{} primitives max {prim:.2e} ({name}); full loss {full:.2e} over {checked} entries", errs.len()),
    )
}

fn c5_losses() -> Outcome {
    let pred = [4.0, 0.0, 0.0, 2.0, 0.0, 0.0];
    let xyz = loss_xyz(&pred, &[0.0; 3], &[true], [1, 2, 1, 1], 0.8).unwrap();
    let ln2 = loss_vis(&[0.0; 3], &[true, true, false], &[true; 3]).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let mut worst_bce = 0.0f64;
    for _ in 0..100 {
        let n = 2 * r.random_range(1..20);
        let x: Vec<f64> = (0..n).map(|_| r.random_range(-4.0..4.0)).collect();
        let mut y: Vec<bool> = (0..n).map(|i| i < n / 2).collect();
        for i in (1..n).rev() {
            y.swap(i, r.random_range(0..=i));
        }
        let plain = x
            .iter()
            .zip(&y)
            .map(|(&x, &y)| {
                let p = 1.0 / (1.0 + (-x).exp());
                -(if y { p.ln() } else { (1.0 - p).ln() })
            })
            .sum::<f64>()
            / n as f64;
        let b = loss_vis(&x, &y, &vec![true; n]).unwrap();
        worst_bce = worst_bce.max((b - plain).abs());
    }
    let e_xyz = (xyz - 2.6).abs();
    let e_ln2 = (ln2 - std::f64::consts::LN_2).abs();
    outcome(
        e_xyz < 1e-9 && e_ln2 < 1e-9 && worst_bce < 1e-6,
        format!("xyz example {xyz} (err {e_xyz:.1e}); 3-sample B-BCE err {e_ln2:.1e}; balanced vs plain BCE {worst_bce:.1e}"),
    )
}

fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => (a - b).abs() < 1e-9,
        (None, None) => true,
        _ => false,
    }
}

fn c6_metrics() -> Outcome {
    let mut fails = Vec::new();
    let line = |errs: &[f64]| -> (Vec<[f64; 3]>, Vec<[f64; 3]>) { (errs.iter().map(|&e| [e, 0.0, 0.0]).collect(), vec![[0.0; 3]; errs.len()]) };
    let (p, g) = line(&[1.0, 2.0, 9.0]);
    if !close(metrics::mte(&p, &g, &[true; 3]), Some(2.0)) {
        fails.push("mte odd");
    }
    let (p, g) = line(&[1.0, 3.0]);
    if !close(metrics::mte(&p, &g, &[true; 2]), Some(2.0)) {
        fails.push("mte even");
    }
    if (metrics::occlusion_accuracy(&[true, true, false, true], &[true, true, false, false]) - 0.75).abs() > 1e-9 {
        fails.push("oa");
    }
    let (p, g) = line(&[0.4, 0.6]);
    if !close(metrics::delta(&p, &g, &[true; 2], 0.5), Some(0.5)) {
        fails.push("delta");
    }
    let p3 = vec![[0.0; 3], [5.0, 0.0, 0.0], [0.0; 3]];
    let g3 = vec![[0.0; 3]; 3];
    if !close(metrics::jaccard(&p3, &g3, &[true, false, true], &[true, true, false], 1.0), Some(1.0 / 3.0)) {
        fails.push("aj 1/3");
    }
    let (p, g) = line(&[0.03; 4]);
    let th = EvalConfig::default().thresholds;
    let m = evaluate_track(
        &TrackSeries {
            track_id: 0,
            frames: (0..4).collect(),
            pred: p,
            gt: g,
            pred_vis: vec![true; 4],
            gt_vis: vec![true; 4],
        },
        &th,
    );
    if !close(m.delta_avg, Some(0.6)) {
        fails.push("delta_avg 0.6");
    }

    let mut dual_worst = 0.0f64;
    let mut dual_bad = 0;
    for seed in 0..20 {
        for s in common::random_series(seed, 10) {
            let lib = evaluate_track(&s, &th);
            let d = common::dual_metrics(&s, &th);
            let mut ok = close(lib.mte, d.mte) && (lib.oa - d.oa).abs() < 1e-9;
            for i in 0..th.len() {
                ok &= close(lib.delta.as_ref().map(|v| v[i]), d.delta[i]);
                ok &= close(lib.aj.as_ref().map(|v| v[i]), d.aj[i]);
                if let (Some(a), Some(b)) = (lib.aj.as_ref().map(|v| v[i]), d.aj[i]) {
                    dual_worst = dual_worst.max((a - b).abs());
                }
            }
            dual_bad += !ok as usize;
        }
    }

    let mut order_bad = 0;
    let mut pairs = 0;
    for seed in 100..200 {
        for mut s in common::random_series(seed, 10) {
            s.pred_vis = s.gt_vis.clone();
            let m = evaluate_track(&s, &th);
            if let (Some(d), Some(a)) = (m.delta, m.aj) {
                for (d, a) in d.iter().zip(&a) {
                    pairs += 1;
                    order_bad += (*a > *d + 1e-12) as usize;
                }
            }
        }
    }
    outcome(
        fails.is_empty() && dual_bad == 0 && order_bad == 0 && pairs > 0,
        format!(
            "fixtures failing: {:?}; dual disagreements {dual_bad}/200 tracks (max AJ diff {dual_worst:.1e}); AJ > delta in {order_bad}/{pairs}",
            fails
        ),
    )
}

fn c7_overfit(fx: &Fixture, last: &Option<(u64, Targets)>) -> Outcome {
    match last {
        Some((step, t)) => outcome(
            t.met(),
            format!(
                "after {step} steps: MTE {:.4} (< 0.02), delta_avg {:.3} (> 0.9), AJ {:.3} (> 0.8); {}",
                t.mte, t.delta_avg, t.aj, fx.note
            ),
        ),
        None => {
            let a = fixture_metrics(fx, 0.0);
            let t = Targets {
                mte: a.mte.unwrap_or(f64::INFINITY),
                delta_avg: a.delta_avg.unwrap_or(0.0),
                aj: a.aj.unwrap_or(0.0),
            };
            outcome(
                t.met(),
                format!("MTE {:.4}, delta_avg {:.3}, AJ {:.3}; {}", t.mte, t.delta_avg, t.aj, fx.note),
            )
        }
    }
}

/// Dataset aggregates of the fixture model with depth noise `sigma`; the noise
/// draw is shared across sigmas.
fn fixture_metrics(fx: &Fixture, sigma: f64) -> metrics::Aggregates {
    let eval = EvalConfig::default();
    let mut scenes = Vec::new();
    for (i, s) in fx.samples.iter().enumerate() {
        let mut video = s.video.clone();
        add_depth_noise(&mut video, sigma, &mut stream_rng(77, i as u64)).unwrap();
        let fwd = fx.tracker.track(&fx.store, &video, &s.queries).unwrap();
        let rows = fwd.rows(&s.queries, eval.vis_threshold);
        scenes.push((s.name.clone(), evaluate_scene(&rows, &s.gt_rows(), &eval, fx.sim.threshold_scale).unwrap()));
    }
    metrics::MetricsReport::from_scenes(&eval.scaled_thresholds(fx.sim.threshold_scale), scenes).aggregates
}

fn c8_windows() -> Outcome {
    let sim = SimConfig {
        n_scenes: 1,
        n_views: 2,
        n_frames: 18,
        n_tracks: 4,
        width: 32,
        height: 32,
        seed: 8,
        ..SimConfig::default()
    };
    let s = TrainSample::from_sim(&generate_scene(&sim, 0).unwrap()).unwrap();
    let mut cfg = common::micro_config();
    cfg.window = 12;
    let mut store = ParamStore::new();
    let base = Tracker::new(&cfg, &mut store, &mut common::rng(8)).unwrap();
    let with_window = |w: usize| {
        let mut t = base.clone();
        t.config.window = w;
        t
    };

    let short = s.video.truncated(10);
    // move late queries into the short clip, at their GT position
    let queries: Vec<io::QueryRow> = s
        .queries
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let t_q = q.t_q % 10;
            io::QueryRow {
                track_id: q.track_id,
                t_q,
                xyz: s.gt.positions[i][t_q],
            }
        })
        .collect();
    let single = with_window(10).track(&store, &short, &queries).unwrap();
    let mut identical = !queries.is_empty() && single.windows == vec![(0, 10)] && single.traces.len() == 1;
    for w in [12, 16, 64] {
        let f = with_window(w).track(&store, &short, &queries).unwrap();
        identical &= f.windows == single.windows && f.positions == single.positions && f.logits == single.logits;
    }

    let long = with_window(12).track(&store, &s.video, &s.queries).unwrap();
    let processed: Vec<(usize, usize)> = long.traces.iter().map(|t| (t.start, t.end)).collect();
    let split = !s.queries.is_empty() && processed == vec![(0, 12), (6, 18)];
    outcome(
        identical && split,
        format!("length 10 identical across T in {{10, 12, 16, 64}}: {identical}; length 18, T 12 processed {processed:?}"),
    )
}

fn c9_equivariance(fx: &Fixture) -> Outcome {
    let shift = Vec3::new(0.61, -0.42, 0.27);
    let sim = Similarity::translation(shift);
    let mut worst = 0.0f64;
    let mut worst_logit = 0.0f64;
    for s in &fx.samples {
        let a = fx.tracker.track(&fx.store, &s.video, &s.queries).unwrap();
        let moved = s.video.transformed(&sim).unwrap();
        let q: Vec<_> = s
            .queries
            .iter()
            .map(|q| io::QueryRow {
                xyz: [q.xyz[0] + shift.x, q.xyz[1] + shift.y, q.xyz[2] + shift.z],
                ..*q
            })
            .collect();
        let b = fx.tracker.track(&fx.store, &moved, &q).unwrap();
        for (pa, pb) in a.positions.iter().flatten().zip(b.positions.iter().flatten()) {
            let d = Vec3::new(pb[0] - pa[0], pb[1] - pa[1], pb[2] - pa[2]) - shift;
            worst = worst.max(d.norm());
        }
        for (la, lb) in a.logits.iter().flatten().zip(b.logits.iter().flatten()) {
            worst_logit = worst_logit.max((la - lb).abs());
        }
    }
    outcome(
        worst < 1e-4,
        format!("max position error {worst:.2e} over 8 scenes (visibility logits differ by {worst_logit:.1e})"),
    )
}

fn c10_noise(fx: &Fixture) -> Outcome {
    let sigmas = [0.0, 0.5, 1.0, 2.0].map(|k| k * NOISE_UNIT);
    let d: Vec<f64> = sigmas.iter().map(|&s| fixture_metrics(fx, s).delta_avg.unwrap_or(0.0)).collect();
    let monotone = d.windows(2).all(|w| w[1] <= w[0]);
    let drop = (d[0] - d[1]) / d[0];
    let table: Vec<String> = sigmas.iter().zip(&d).map(|(s, d)| format!("{s}:{d:.4}")).collect();
    outcome(
        monotone && drop < 0.1,
        format!("delta_avg by sigma {}; non-increasing {monotone}; first drop {:.1}%", table.join(" "), drop * 100.0),
    )
}

fn files_under(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn c11_formats(fx: &Fixture) -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let ck = tmp.path().join("model.ckpt");
    tensor::write_checkpoint(&ck, &fx.store).unwrap();
    let back = tensor::read_checkpoint(&ck).unwrap();
    let mut ckpt_ok = back.len() == fx.store.len();
    for id in fx.store.ids() {
        let (a, b) = (fx.store.get(id), back.get(id));
        ckpt_ok &= a.name == b.name && a.value.shape() == b.value.shape();
        ckpt_ok &= a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    }
    ckpt_ok &= tensor::encode_checkpoint(&back) == std::fs::read(&ck).unwrap();

    let mut depth_ok = true;
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let mut maps: Vec<DepthMap> = fx.samples[0].video.depth.iter().flatten().take(8).cloned().collect();
    maps.push(DepthMap {
        width: 5,
        height: 3,
        data: (0..15).map(|i| if i % 4 == 0 { f32::NAN } else { r.random_range(1e-6f32..1e6) }).collect(),
    });
    for (i, m) in maps.iter().enumerate() {
        let p = tmp.path().join(format!("d{i}.mvd"));
        io::write_depth(&p, m).unwrap();
        let back = io::read_depth(&p).unwrap();
        depth_ok &= back.width == m.width && back.height == m.height;
        depth_ok &= back.data.iter().zip(&m.data).all(|(a, b)| a.to_bits() == b.to_bits());
        depth_ok &= io::encode_depth(&back) == std::fs::read(&p).unwrap();
    }

    let cfg = SimConfig {
        n_scenes: 2,
        n_views: 3,
        n_frames: 6,
        n_tracks: 8,
        width: 32,
        height: 32,
        seed: 1234,
        ..SimConfig::default()
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    generate_dataset(&cfg, &a).unwrap();
    generate_dataset(&cfg, &b).unwrap();
    let (fa, fb) = (files_under(&a), files_under(&b));
    let sim_ok = !fa.is_empty() && fa == fb;
    outcome(
        ckpt_ok && depth_ok && sim_ok,
        format!(
            "checkpoint bit-exact {ckpt_ok}; {} depth maps bit-exact {depth_ok}; simulate identical over {} files {sim_ok}",
            maps.len(),
            fa.len()
        ),
    )
}

fn c12_determinism(fx: &Fixture) -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let scene_dir = tmp.path().join("scene");
    fx.scenes[0].write(&fx.sim, &scene_dir).unwrap();
    let ck = tmp.path().join("model.ckpt");
    tracker::save_model(&ck, &fx.tracker, &fx.store).unwrap();
    let run = |name: &str| -> Vec<u8> {
        let out = tmp.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_mvtrack"))
            .args(["--threads", "1", "track", "--scene"])
            .arg(&scene_dir)
            .arg("--checkpoint")
            .arg(&ck)
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap();
        assert!(status.status.success(), "track failed: {}", String::from_utf8_lossy(&status.stderr));
        std::fs::read(&out).unwrap()
    };
    let a = run("a.csv");
    let b = run("b.csv");
    let rows = a.iter().filter(|&&c| c == b'\n').count();
    outcome(a == b && rows > 1, format!("two single-threaded runs, {rows} lines, identical {}", a == b))
}

fn main() {
    let picked: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |c: u32| picked.is_empty() || picked.contains(&c);
    let needs_fixture = [3, 7, 9, 10, 11, 12].iter().any(|&c| want(c));

    let mut results: Vec<(u32, &str, Outcome, f64)> = Vec::new();
    let mut run = |id: u32, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        if want(id) {
            let t0 = Instant::now();
            let o = f();
            let secs = t0.elapsed().as_secs_f64();
            println!("criterion {id:>2} {} {name} ({secs:.1} s): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            results.push((id, name, o, secs));
        }
    };

    run(1, "geometry round trip", &mut c1_geometry);
    run(2, "kNN exactness", &mut c2_knn);
    run(4, "gradient correctness", &mut c4_gradients);
    run(5, "loss oracles", &mut c5_losses);
    run(6, "metric oracles", &mut c6_metrics);
    run(8, "windowed consistency", &mut c8_windows);
    if needs_fixture {
        let t0 = Instant::now();
        let (fx, last) = if want(7) || want(9) || want(10) || want(12) {
            train_fixture()
        } else {
            let sim = fixture_sim();
            let scenes: Vec<SimScene> = (0..sim.n_scenes).map(|i| generate_scene(&sim, i).unwrap()).collect();
            let samples = scenes.iter().map(|s| TrainSample::from_sim(s).unwrap()).collect();
            let mut store = ParamStore::new();
            let tracker = Tracker::new(&overfit_config().model, &mut store, &mut common::rng(0)).unwrap();
            let note = "untrained".to_string();
            (Fixture { sim, samples, scenes, tracker, store, note }, None)
        };
        let fixture_secs = t0.elapsed().as_secs_f64();
        run(3, "fusion count law and equivariance", &mut || c3_fusion(&fx));
        run(7, "overfit convergence", &mut || {
            let mut o = c7_overfit(&fx, &last);
            o.detail = format!("{} (fixture {fixture_secs:.0} s)", o.detail);
            o
        });
        run(9, "tracker translation equivariance", &mut || c9_equivariance(&fx));
        run(10, "depth-noise trend", &mut || c10_noise(&fx));
        run(11, "format round trips", &mut || c11_formats(&fx));
        run(12, "single-thread determinism", &mut || c12_determinism(&fx));
    }

    results.sort_by_key(|r| r.0);
    let failed: Vec<String> = results.iter().filter(|r| !r.2.pass).map(|r| format!("{} ({})", r.0, r.1)).collect();
    println!(
        "acceptance: {} of {} criteria passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
