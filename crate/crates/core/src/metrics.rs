//! Tracking metrics: MTE, OA, delta thresholds and average Jaccard.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Projection, Vec3};
use crate::io::{self, GtRow, PredRow, ViewCameras};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Distance thresholds in world units, before the per-scene scale.
    pub thresholds: Vec<f64>,
    pub vis_threshold: f64,
    /// Pixel thresholds of the projected 2D accuracy.
    pub pixel_thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: vec![0.01, 0.02, 0.05, 0.1, 0.2],
            vis_threshold: 0.5,
            pixel_thresholds: vec![1.0, 2.0, 4.0, 8.0, 16.0],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, th) in [("thresholds", &self.thresholds), ("pixel_thresholds", &self.pixel_thresholds)] {
            if th.is_empty() && name == "thresholds" {
                return Err(Error::invalid("at least one distance threshold is required"));
            }
            if th.iter().any(|&x| !(x > 0.0 && x.is_finite())) || th.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::invalid(format!("{name} must be positive and strictly increasing")));
            }
        }
        Ok(())
    }

    pub fn scaled_thresholds(&self, scale: f64) -> Vec<f64> {
        self.thresholds.iter().map(|x| x * scale).collect()
    }
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Median; even counts average the two central values.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Median error over GT-visible frames; `None` without any.
pub fn mte(pred: &[[f64; 3]], gt: &[[f64; 3]], gt_vis: &[bool]) -> Option<f64> {
    let errs: Vec<f64> = pred
        .iter()
        .zip(gt)
        .zip(gt_vis)
        .filter(|(_, &v)| v)
        .map(|((p, g), _)| dist(p, g))
        .collect();
    median(&errs)
}

/// Fraction of frames whose predicted visibility is right.
pub fn occlusion_accuracy(pred_vis: &[bool], gt_vis: &[bool]) -> f64 {
    if gt_vis.is_empty() {
        return 1.0;
    }
    pred_vis.iter().zip(gt_vis).filter(|(a, b)| a == b).count() as f64 / gt_vis.len() as f64
}

/// Fraction of GT-visible frames with error strictly below `x`.
pub fn delta(pred: &[[f64; 3]], gt: &[[f64; 3]], gt_vis: &[bool], x: f64) -> Option<f64> {
    let (mut hit, mut n) = (0usize, 0usize);
    for ((p, g), &v) in pred.iter().zip(gt).zip(gt_vis) {
        if v {
            n += 1;
            if dist(p, g) < x {
                hit += 1;
            }
        }
    }
    (n > 0).then(|| hit as f64 / n as f64)
}

/// Jaccard at one threshold; `None` when neither GT nor prediction is ever visible.
pub fn jaccard(pred: &[[f64; 3]], gt: &[[f64; 3]], pred_vis: &[bool], gt_vis: &[bool], x: f64) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for (((p, g), &pv), &gv) in pred.iter().zip(gt).zip(pred_vis).zip(gt_vis) {
        let v = gv as u8 as f64;
        let vh = pv as u8 as f64;
        let alpha = if gv && dist(p, g) < x { 1.0 } else { 0.0 };
        num += v * vh * alpha;
        den += v + (1.0 - v) * vh + v * vh * (1.0 - alpha);
    }
    (den > 0.0).then(|| num / den)
}

/// Mean of [`jaccard`] over thresholds, with the per-threshold values.
pub fn average_jaccard(
    pred: &[[f64; 3]],
    gt: &[[f64; 3]],
    pred_vis: &[bool],
    gt_vis: &[bool],
    thresholds: &[f64],
) -> Option<(f64, Vec<f64>)> {
    let per: Option<Vec<f64>> = thresholds.iter().map(|&x| jaccard(pred, gt, pred_vis, gt_vis, x)).collect();
    let per = per?;
    Some((mean(&per)?, per))
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// One track's evaluated frames (those at or after its query frame).
#[derive(Clone, Debug, PartialEq)]
pub struct TrackSeries {
    pub track_id: usize,
    pub frames: Vec<usize>,
    pub pred: Vec<[f64; 3]>,
    pub gt: Vec<[f64; 3]>,
    pub pred_vis: Vec<bool>,
    pub gt_vis: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackMetrics {
    pub mte: Option<f64>,
    pub oa: f64,
    pub delta: Option<Vec<f64>>,
    pub delta_avg: Option<f64>,
    pub aj: Option<Vec<f64>>,
    pub aj_avg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_2d_avg: Option<f64>,
}

pub fn evaluate_track(s: &TrackSeries, thresholds: &[f64]) -> TrackMetrics {
    let deltas: Option<Vec<f64>> = thresholds.iter().map(|&x| delta(&s.pred, &s.gt, &s.gt_vis, x)).collect();
    let aj = average_jaccard(&s.pred, &s.gt, &s.pred_vis, &s.gt_vis, thresholds);
    // the Jaccard denominator counts every GT-visible frame, so AJ is dropped with MTE
    let has_visible = s.gt_vis.iter().any(|&v| v);
    let aj = aj.filter(|_| has_visible);
    TrackMetrics {
        mte: mte(&s.pred, &s.gt, &s.gt_vis),
        oa: occlusion_accuracy(&s.pred_vis, &s.gt_vis),
        delta_avg: deltas.as_deref().and_then(mean),
        delta: deltas,
        aj_avg: aj.as_ref().map(|a| a.0),
        aj: aj.map(|a| a.1),
        delta_2d_avg: None,
    }
}

/// Means over tracks (or scenes) that have each value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub mte: Option<f64>,
    pub oa: Option<f64>,
    pub delta_avg: Option<f64>,
    pub aj: Option<f64>,
    pub delta: Vec<Option<f64>>,
    pub aj_per_threshold: Vec<Option<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_2d_avg: Option<f64>,
}

fn mean_some(it: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = it.flatten().collect();
    mean(&v)
}

impl Aggregates {
    pub fn of_tracks(tracks: &[&TrackMetrics], n_thresholds: usize) -> Self {
        Self {
            mte: mean_some(tracks.iter().map(|t| t.mte)),
            oa: mean_some(tracks.iter().map(|t| Some(t.oa))),
            delta_avg: mean_some(tracks.iter().map(|t| t.delta_avg)),
            aj: mean_some(tracks.iter().map(|t| t.aj_avg)),
            delta: (0..n_thresholds)
                .map(|i| mean_some(tracks.iter().map(|t| t.delta.as_ref().map(|d| d[i]))))
                .collect(),
            aj_per_threshold: (0..n_thresholds)
                .map(|i| mean_some(tracks.iter().map(|t| t.aj.as_ref().map(|d| d[i]))))
                .collect(),
            delta_2d_avg: mean_some(tracks.iter().map(|t| t.delta_2d_avg)),
        }
    }

    pub fn of_scenes(scenes: &[&Aggregates], n_thresholds: usize) -> Self {
        Self {
            mte: mean_some(scenes.iter().map(|s| s.mte)),
            oa: mean_some(scenes.iter().map(|s| s.oa)),
            delta_avg: mean_some(scenes.iter().map(|s| s.delta_avg)),
            aj: mean_some(scenes.iter().map(|s| s.aj)),
            delta: (0..n_thresholds).map(|i| mean_some(scenes.iter().map(|s| s.delta[i]))).collect(),
            aj_per_threshold: (0..n_thresholds)
                .map(|i| mean_some(scenes.iter().map(|s| s.aj_per_threshold[i])))
                .collect(),
            delta_2d_avg: mean_some(scenes.iter().map(|s| s.delta_2d_avg)),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Exclusions {
    /// Tracks without a GT-visible frame: no MTE, delta or AJ.
    pub no_visible_frames: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneReport {
    pub tracks: BTreeMap<usize, TrackMetrics>,
    pub aggregates: Aggregates,
    pub exclusions: Exclusions,
    /// Distance thresholds actually applied (after the scene's scale).
    pub thresholds: Vec<f64>,
}

pub fn evaluate_series(series: &[TrackSeries], thresholds: &[f64]) -> SceneReport {
    let tracks: BTreeMap<usize, TrackMetrics> = series.iter().map(|s| (s.track_id, evaluate_track(s, thresholds))).collect();
    let refs: Vec<&TrackMetrics> = tracks.values().collect();
    let aggregates = Aggregates::of_tracks(&refs, thresholds.len());
    let exclusions = Exclusions {
        no_visible_frames: tracks.iter().filter(|(_, m)| m.mte.is_none()).map(|(&id, _)| id).collect(),
    };
    SceneReport {
        tracks,
        aggregates,
        exclusions,
        thresholds: thresholds.to_vec(),
    }
}

/// Pair predictions with GT by `(track_id, t)`. Frames evaluated per track are
/// the predicted ones; every GT track needs predictions.
pub fn align(pred: &[PredRow], gt: &[GtRow]) -> Result<Vec<TrackSeries>> {
    let mut gt_by: BTreeMap<usize, BTreeMap<usize, &GtRow>> = BTreeMap::new();
    for r in gt {
        gt_by.entry(r.track_id).or_default().insert(r.t, r);
    }
    let mut pred_by: HashMap<usize, BTreeMap<usize, &PredRow>> = HashMap::new();
    for r in pred {
        pred_by.entry(r.track_id).or_default().insert(r.t, r);
    }
    let missing: Vec<String> = gt_by.keys().filter(|id| !pred_by.contains_key(id)).map(|id| id.to_string()).collect();
    if !missing.is_empty() {
        return Err(Error::invalid(format!("no predictions for tracks {}", missing.join(", "))));
    }
    let extra: Vec<String> = pred_by.keys().filter(|id| !gt_by.contains_key(id)).map(|id| id.to_string()).collect();
    if !extra.is_empty() {
        return Err(Error::invalid(format!("predicted tracks without ground truth: {}", extra.join(", "))));
    }
    let mut out = Vec::with_capacity(gt_by.len());
    for (&id, g) in &gt_by {
        let p = &pred_by[&id];
        let mut s = TrackSeries {
            track_id: id,
            frames: Vec::new(),
            pred: Vec::new(),
            gt: Vec::new(),
            pred_vis: Vec::new(),
            gt_vis: Vec::new(),
        };
        for (&t, pr) in p {
            let gr = g
                .get(&t)
                .ok_or_else(|| Error::invalid(format!("track {id} predicted at frame {t} without ground truth")))?;
            s.frames.push(t);
            s.pred.push(pr.xyz);
            s.gt.push(gr.xyz);
            s.pred_vis.push(pr.visible);
            s.gt_vis.push(gr.visible);
        }
        out.push(s);
    }
    Ok(out)
}

pub fn evaluate_scene(pred: &[PredRow], gt: &[GtRow], cfg: &EvalConfig, threshold_scale: f64) -> Result<SceneReport> {
    cfg.validate()?;
    let series = align(pred, gt)?;
    Ok(evaluate_series(&series, &cfg.scaled_thresholds(threshold_scale)))
}

/// Pixel positions of a 3D track in every view; `None` behind the camera.
pub fn project_tracks_2d(positions: &[[f64; 3]], frames: &[usize], cams: &[ViewCameras]) -> Vec<Vec<Option<[f64; 2]>>> {
    cams.iter()
        .map(|vc| {
            positions
                .iter()
                .zip(frames)
                .map(|(p, &t)| match vc.at(t).project_point(&Vec3::new(p[0], p[1], p[2])) {
                    Projection::Visible { pixel, .. } => Some(pixel),
                    Projection::BehindCamera { .. } => None,
                })
                .collect()
        })
        .collect()
}

/// Pixel-threshold accuracy averaged over thresholds and views.
///
/// Per view, GT-visible frames where both points project in front of the camera count.
pub fn delta_2d(s: &TrackSeries, cams: &[ViewCameras], pixel_thresholds: &[f64]) -> Option<f64> {
    let pp = project_tracks_2d(&s.pred, &s.frames, cams);
    let gp = project_tracks_2d(&s.gt, &s.frames, cams);
    let mut per_view = Vec::new();
    for (pv, gv) in pp.iter().zip(&gp) {
        let errs: Vec<f64> = pv
            .iter()
            .zip(gv)
            .zip(&s.gt_vis)
            .filter_map(|((p, g), &vis)| match (p, g, vis) {
                (Some(p), Some(g), true) => Some(((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt()),
                _ => None,
            })
            .collect();
        if errs.is_empty() {
            continue;
        }
        let per: Vec<f64> = pixel_thresholds
            .iter()
            .map(|&x| errs.iter().filter(|&&e| e < x).count() as f64 / errs.len() as f64)
            .collect();
        per_view.push(mean(&per)?);
    }
    mean(&per_view)
}

/// Fill `delta_2d_avg` for every track of a scene report.
pub fn add_delta_2d(report: &mut SceneReport, series: &[TrackSeries], cams: &[ViewCameras], pixel_thresholds: &[f64]) {
    for s in series {
        if let Some(m) = report.tracks.get_mut(&s.track_id) {
            m.delta_2d_avg = delta_2d(s, cams, pixel_thresholds);
        }
    }
    let refs: Vec<&TrackMetrics> = report.tracks.values().collect();
    report.aggregates = Aggregates::of_tracks(&refs, report.thresholds.len());
}

/// Evaluation of several scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub thresholds: Vec<f64>,
    /// `scene -> track_id -> metrics`.
    pub dataset: BTreeMap<String, BTreeMap<String, TrackMetrics>>,
    pub scenes: BTreeMap<String, Aggregates>,
    pub aggregates: Aggregates,
    pub exclusions: BTreeMap<String, Exclusions>,
}

impl MetricsReport {
    pub fn from_scenes(thresholds: &[f64], scenes: Vec<(String, SceneReport)>) -> Self {
        let aggs: Vec<&Aggregates> = scenes.iter().map(|(_, r)| &r.aggregates).collect();
        let aggregates = Aggregates::of_scenes(&aggs, thresholds.len());
        let mut out = Self {
            thresholds: thresholds.to_vec(),
            dataset: BTreeMap::new(),
            scenes: BTreeMap::new(),
            aggregates,
            exclusions: BTreeMap::new(),
        };
        for (name, r) in scenes {
            out.dataset
                .insert(name.clone(), r.tracks.into_iter().map(|(id, m)| (id.to_string(), m)).collect());
            out.scenes.insert(name.clone(), r.aggregates);
            out.exclusions.insert(name, r.exclusions);
        }
        out
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        Ok(io::write_json(path, self)?)
    }

    /// Flat `scene,track,metric,value` rows.
    pub fn flat_rows(&self) -> Vec<Vec<String>> {
        let mut rows = Vec::new();
        for (scene, tracks) in &self.dataset {
            for (id, m) in tracks {
                let mut push = |name: String, v: Option<f64>| {
                    if let Some(v) = v {
                        rows.push(vec![scene.clone(), id.clone(), name, v.to_string()]);
                    }
                };
                push("mte".into(), m.mte);
                push("oa".into(), Some(m.oa));
                push("delta_avg".into(), m.delta_avg);
                push("aj".into(), m.aj_avg);
                push("delta_2d_avg".into(), m.delta_2d_avg);
                for (i, x) in self.thresholds.iter().enumerate() {
                    push(format!("delta@{x}"), m.delta.as_ref().map(|d| d[i]));
                    push(format!("aj@{x}"), m.aj.as_ref().map(|d| d[i]));
                }
            }
        }
        rows
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        Ok(io::write_table(path, &["scene", "track", "metric", "value"], &self.flat_rows())?)
    }
}
