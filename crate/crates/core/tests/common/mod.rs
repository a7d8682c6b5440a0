#![allow(dead_code)]

use mvtrack::scenesim::{generate_scene, SimConfig, SimScene};
use mvtrack::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero, for kinked ops.
pub fn away_from_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.random_range(0.2..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest relative error between analytic and central-difference gradients of
/// `sum(build(inputs) * R)` for a fixed random `R`, over every input element.
pub fn max_fd_error(inputs: &[Tensor<f64>], build: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    const H: f64 = 1e-3;
    let weights = {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let mut r = rng(99);
        random_tensor(tape.shape(out), &mut r)
    };
    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.variable(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]);
        for i in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            worst = worst.max(rel_err(analytic[i], numeric));
        }
    }
    worst
}

/// A tiny simulator scene for end-to-end checks.
pub fn micro_scene(views: usize, frames: usize, tracks: usize, size: usize, seed: u64) -> SimScene {
    let cfg = SimConfig {
        n_scenes: 1,
        n_views: views,
        n_frames: frames,
        n_tracks: tracks,
        width: size,
        height: size,
        seed,
        ..SimConfig::default()
    };
    generate_scene(&cfg, 0).unwrap()
}

use mvtrack::encoder::EncoderConfig;
use mvtrack::tensor::ParamStore;
use mvtrack::tracker::{PreparedVideo, Tracker, TrackerConfig};
use mvtrack::training::{losses_on_tape, LossConfig, TrainSample};

/// A very small tracker configuration for gradient and plumbing tests.
pub fn micro_config() -> TrackerConfig {
    TrackerConfig {
        encoder: EncoderConfig {
            stem_width: 4,
            width: 4,
            blocks: 1,
            dim: 8,
            levels: 2,
        },
        hidden: 16,
        heads: 2,
        head_dim: 8,
        mlp_ratio: 2,
        layers: 2,
        virtual_tracks: 2,
        iterations: 2,
        num_freqs: 3,
        zero_init_head: false,
        detach_tokens: false,
        ..TrackerConfig::default()
    }
}

/// Full training loss in 64-bit: analytic gradients against central differences
/// for a few entries of every parameter. Returns `(max relative error, checked)`.
pub fn full_loss_fd_error() -> (f64, usize) {
    const H: f64 = 1e-3;
    let sim = micro_scene(2, 2, 2, 16, 3);
    let sample = TrainSample::from_sim(&sim).unwrap();
    assert_eq!(sample.queries.len(), 2);
    let cfg = micro_config();
    let mut store32 = ParamStore::new();
    let tracker = Tracker::new(&cfg, &mut store32, &mut rng(5)).unwrap();
    let store: ParamStore<f64> = store32.cast();
    let prepared = PreparedVideo::new(&sample.video, cfg.encoder.levels).unwrap();
    let loss_cfg = LossConfig::default();
    let run = |s: &ParamStore<f64>, grad: bool| -> (f64, Option<ParamStore<f64>>) {
        let mut tape = Tape::<f64>::new();
        let levels = tracker.encode_video(&mut tape, s, &sample.video).unwrap();
        let fwd = tracker.forward_windows(&mut tape, s, &levels, &prepared, &sample.queries).unwrap();
        let l = losses_on_tape(&mut tape, &fwd, &sample.queries, &sample.gt, &loss_cfg).unwrap();
        let v = tape.value(l.total).item();
        if !grad {
            return (v, None);
        }
        let g = tape.backward(l.total).unwrap();
        let mut s2 = s.clone();
        s2.zero_grad();
        s2.accumulate(&tape, &g);
        s2.fill_missing_grads();
        (v, Some(s2))
    };
    let (_, with_grads) = run(&store, true);
    let with_grads = with_grads.unwrap();
    let mut worst = 0.0f64;
    let mut checked = 0;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.value(id).numel();
        let mut picks = vec![0, n / 2, n - 1];
        picks.dedup();
        for i in picks {
            let analytic = with_grads.get(id).grad.as_ref().unwrap().data()[i];
            let mut plus = store.clone();
            plus.get_mut(id).value.data_mut()[i] += H;
            let mut minus = store.clone();
            minus.get_mut(id).value.data_mut()[i] -= H;
            let numeric = (run(&plus, false).0 - run(&minus, false).0) / (2.0 * H);
            if std::env::var("FD_DEBUG").is_ok() && rel_err(analytic, numeric) > 1e-3 {
                eprintln!("{} [{i}] analytic {analytic:e} numeric {numeric:e}", store.get(id).name);
            }
            worst = worst.max(rel_err(analytic, numeric));
            checked += 1;
        }
    }
    (worst, checked)
}

/// Relative FD error of every tensor primitive, by name.
pub fn primitive_fd_errors() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut r = rng(1);

    let ins = [random_tensor(&[3, 4], &mut r), random_tensor(&[3, 4], &mut r)];
    out.push(("add", max_fd_error(&ins, |t, v| t.add(v[0], v[1]).unwrap())));
    out.push(("sub", max_fd_error(&ins, |t, v| t.sub(v[0], v[1]).unwrap())));
    out.push(("mul", max_fd_error(&ins, |t, v| t.mul(v[0], v[1]).unwrap())));

    let ins = [random_tensor(&[2, 3, 4], &mut r), random_tensor(&[4], &mut r)];
    out.push(("add_row", max_fd_error(&ins, |t, v| t.add_row(v[0], v[1]).unwrap())));
    out.push(("mul_row", max_fd_error(&ins, |t, v| t.mul_row(v[0], v[1]).unwrap())));
    out.push(("scale", max_fd_error(&ins[..1], |t, v| t.scale(v[0], -1.7).unwrap())));

    let ins = [random_tensor(&[2, 3, 4], &mut r), random_tensor(&[4, 5], &mut r), random_tensor(&[5], &mut r)];
    out.push(("matmul", max_fd_error(&ins[..2], |t, v| t.matmul(v[0], v[1]).unwrap())));
    out.push(("linear", max_fd_error(&ins, |t, v| t.linear(v[0], v[1], Some(v[2])).unwrap())));
    let b = [random_tensor(&[2, 3, 4], &mut r), random_tensor(&[2, 4, 5], &mut r)];
    out.push(("bmm", max_fd_error(&b, |t, v| t.bmm(v[0], v[1], false).unwrap())));
    let bt = [random_tensor(&[2, 3, 4], &mut r), random_tensor(&[2, 5, 4], &mut r)];
    out.push(("bmm_t", max_fd_error(&bt, |t, v| t.bmm(v[0], v[1], true).unwrap())));

    let ins = [random_tensor(&[3, 5], &mut r)];
    out.push(("softmax", max_fd_error(&ins, |t, v| t.softmax(v[0]).unwrap())));
    out.push(("layer_norm", max_fd_error(&ins, |t, v| t.layer_norm(v[0], 1e-5).unwrap())));

    let ins = [random_tensor(&[4, 3], &mut r)];
    out.push(("gelu", max_fd_error(&ins, |t, v| t.gelu(v[0]).unwrap())));
    out.push(("sigmoid", max_fd_error(&ins, |t, v| t.sigmoid(v[0]).unwrap())));
    let kinked = [away_from_zero(&[4, 3], &mut r)];
    out.push(("relu", max_fd_error(&kinked, |t, v| t.relu(v[0]).unwrap())));
    out.push(("abs", max_fd_error(&kinked, |t, v| t.abs(v[0]).unwrap())));

    let a = random_tensor(&[2, 3, 4], &mut r);
    let ins = [a.clone(), random_tensor(&[2, 3, 2], &mut r)];
    out.push(("concat", max_fd_error(&ins, |t, v| t.concat(&[v[0], v[1]]).unwrap())));
    let rows = [a.clone(), random_tensor(&[1, 3, 4], &mut r)];
    out.push(("concat_rows", max_fd_error(&rows, |t, v| t.concat_rows(&[v[0], v[1]]).unwrap())));
    let one = [a];
    out.push(("reshape", max_fd_error(&one, |t, v| t.reshape(v[0], &[6, 4]).unwrap())));
    out.push(("permute", max_fd_error(&one, |t, v| t.permute(v[0], &[2, 0, 1]).unwrap())));
    out.push(("gather_rows", max_fd_error(&one, |t, v| t.gather_rows(v[0], &[1, 0, 1, 1]).unwrap())));
    out.push(("narrow", max_fd_error(&one, |t, v| t.narrow(v[0], 1, 2).unwrap())));

    let ins = [random_tensor(&[2, 5, 6, 3], &mut r), random_tensor(&[3, 3, 3, 4], &mut r)];
    out.push(("conv2d s1", max_fd_error(&ins, |t, v| t.conv2d(v[0], v[1], 1, 1).unwrap())));
    out.push(("conv2d s2", max_fd_error(&ins, |t, v| t.conv2d(v[0], v[1], 2, 1).unwrap())));
    let pw = [random_tensor(&[1, 3, 3, 2], &mut r), random_tensor(&[1, 1, 2, 3], &mut r)];
    out.push(("conv2d 1x1", max_fd_error(&pw, |t, v| t.conv2d(v[0], v[1], 1, 0).unwrap())));
    let pool = [random_tensor(&[2, 4, 6, 3], &mut r)];
    out.push(("avg_pool2", max_fd_error(&pool, |t, v| t.avg_pool2(v[0]).unwrap())));

    let ins = [random_tensor(&[3, 4], &mut r)];
    out.push(("sum", max_fd_error(&ins, |t, v| t.sum(v[0]).unwrap())));
    out.push(("mean", max_fd_error(&ins, |t, v| t.mean(v[0]).unwrap())));
    let targets: Vec<f64> = (0..12).map(|i| (i % 3 == 0) as u8 as f64).collect();
    out.push(("bce", max_fd_error(&ins, |t, v| t.bce_with_logits(v[0], &targets).unwrap())));
    let pts = [random_tensor(&[4, 3], &mut r)];
    out.push(("sinusoid", max_fd_error(&pts, |t, v| t.sinusoid(v[0], 3).unwrap())));
    out
}

use mvtrack::metrics::TrackSeries;

/// Plain per-track metrics by counting true/false positives, independent of
/// the library code. Returns `(mte, oa, delta per x, aj per x)`.
pub struct DualMetrics {
    pub mte: Option<f64>,
    pub oa: f64,
    pub delta: Vec<Option<f64>>,
    pub aj: Vec<Option<f64>>,
}

pub fn dual_metrics(s: &TrackSeries, thresholds: &[f64]) -> DualMetrics {
    let n = s.frames.len();
    let err: Vec<f64> = (0..n)
        .map(|i| {
            let d: Vec<f64> = (0..3).map(|c| s.pred[i][c] - s.gt[i][c]).collect();
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
        })
        .collect();
    let mut vis_err: Vec<f64> = (0..n).filter(|&i| s.gt_vis[i]).map(|i| err[i]).collect();
    vis_err.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = vis_err.len();
    let mte = match m {
        0 => None,
        _ if m % 2 == 1 => Some(vis_err[m / 2]),
        _ => Some((vis_err[m / 2 - 1] + vis_err[m / 2]) / 2.0),
    };
    let agree = (0..n).filter(|&i| s.pred_vis[i] == s.gt_vis[i]).count();
    let oa = if n == 0 { 1.0 } else { agree as f64 / n as f64 };
    let mut delta = Vec::new();
    let mut aj = Vec::new();
    for &x in thresholds {
        let close = |i: usize| err[i] < x;
        let hits = (0..n).filter(|&i| s.gt_vis[i] && close(i)).count();
        delta.push((m > 0).then(|| hits as f64 / m as f64));
        let tp = (0..n).filter(|&i| s.gt_vis[i] && s.pred_vis[i] && close(i)).count();
        let fp = (0..n).filter(|&i| s.pred_vis[i] && !(s.gt_vis[i] && close(i))).count();
        let fn_ = (0..n).filter(|&i| s.gt_vis[i] && !(s.pred_vis[i] && close(i))).count();
        aj.push((m > 0).then(|| tp as f64 / (tp + fp + fn_) as f64));
    }
    DualMetrics { mte, oa, delta, aj }
}

/// Ten random tracks of mixed length; errors straddle the default thresholds.
/// Some tracks never have a GT-visible frame.
pub fn random_series(seed: u64, count: usize) -> Vec<TrackSeries> {
    let mut r = rng(seed);
    (0..count)
        .map(|id| {
            let n = r.random_range(1..25);
            let p_vis = if id % 7 == 3 { 0.0 } else { r.random_range(0.3..1.0) };
            let gt: Vec<[f64; 3]> = (0..n).map(|_| [r.random_range(-2.0..2.0), r.random_range(-2.0..2.0), r.random_range(0.0..3.0)]).collect();
            let scale = [0.005, 0.03, 0.15][id % 3];
            let pred = gt
                .iter()
                .map(|g| [g[0] + r.random_range(-scale..scale), g[1] + r.random_range(-scale..scale), g[2] + r.random_range(-scale..scale)])
                .collect();
            let gt_vis: Vec<bool> = (0..n).map(|_| r.random_bool(p_vis)).collect();
            let pred_vis = gt_vis.iter().map(|&v| if r.random_bool(0.2) { !v } else { v }).collect();
            TrackSeries {
                track_id: id,
                frames: (0..n).collect(),
                pred,
                gt,
                pred_vis,
                gt_vis,
            }
        })
        .collect()
}
