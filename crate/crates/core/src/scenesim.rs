//! Synthetic multi-view scenes: rigid primitives under scripted motion,
//! ray-cast depth and color, and ground-truth tracks with any-view visibility.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{intrinsics, look_at, Camera, DepthMap, GeometryError, Projection, Vec3};
use crate::io::{self, GtRow, IoError, QueryRow, RgbImage, SceneManifest, ViewCameras};

/// Minimum ray parameter used to avoid self-intersection.
pub const RAY_EPS: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("image resolution must be positive, got {width}x{height}")]
    ZeroResolution { width: usize, height: usize },
    #[error("scene has no sampleable bodies")]
    NoBodies,
    #[error("at least one camera is required")]
    NoCameras,
    #[error("n_tracks must be at least 1")]
    NoTracks,
    #[error("could not find {wanted} visible surface points after {attempts} attempts")]
    NotEnoughVisible { wanted: usize, attempts: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] IoError),
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { radius: f64 },
    /// Box centered on the body origin, axis-aligned in the body frame.
    Cuboid { half: [f64; 3] },
    /// Static horizontal plane `z = height` in world coordinates.
    Plane { height: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Albedo {
    Checker { a: [f32; 3], b: [f32; 3], cell: f64 },
    /// Solid color with deterministic per-cell brightness noise.
    Solid { color: [f32; 3], noise: f32, cell: f64 },
}

impl Albedo {
    pub fn at(&self, p: &Vec3) -> [f32; 3] {
        let cell_index = |cell: f64| {
            (
                (p.x / cell).floor() as i64,
                (p.y / cell).floor() as i64,
                (p.z / cell).floor() as i64,
            )
        };
        match *self {
            Albedo::Checker { a, b, cell } => {
                let (i, j, k) = cell_index(cell);
                if (i + j + k).rem_euclid(2) == 0 {
                    a
                } else {
                    b
                }
            }
            Albedo::Solid { color, noise, cell } => {
                let (i, j, k) = cell_index(cell);
                let h = (i.wrapping_mul(73856093) ^ j.wrapping_mul(19349663) ^ k.wrapping_mul(83492791)) as u64;
                let h = h.wrapping_mul(0x9E3779B97F4A7C15) >> 40;
                let r = (h as f32 / (1u64 << 24) as f32) * 2.0 - 1.0;
                color.map(|c| (c * (1.0 + noise * r)).clamp(0.0, 1.0))
            }
        }
    }
}

/// Body pose at a keyframe: translation plus rotation about world z.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub frame: f64,
    pub translation: [f64; 3],
    pub yaw: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Pose {
    pub fn apply(&self, local: &Vec3) -> Vec3 {
        self.rotation * local + self.translation
    }

    pub fn to_local(&self, world: &Vec3) -> Vec3 {
        self.rotation.transpose() * (world - self.translation)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidBody {
    pub shape: Shape,
    /// Piecewise-linear motion; a single keyframe means static.
    pub motion: Vec<Keyframe>,
    pub albedo: Albedo,
}

impl RigidBody {
    pub fn new(shape: Shape, motion: Vec<Keyframe>, albedo: Albedo) -> Result<Self> {
        let ok = match &shape {
            Shape::Sphere { radius } => *radius > 0.0,
            Shape::Cuboid { half } => half.iter().all(|&h| h > 0.0),
            Shape::Plane { height } => height.is_finite(),
        };
        if !ok {
            return Err(SimError::Config(format!("degenerate shape {shape:?}")));
        }
        if motion.is_empty() || motion.windows(2).any(|w| w[1].frame <= w[0].frame) {
            return Err(SimError::Config("motion keyframes must be non-empty and strictly increasing".into()));
        }
        Ok(Self { shape, motion, albedo })
    }

    pub fn is_static(&self) -> bool {
        self.motion.windows(2).all(|w| w[0].translation == w[1].translation && w[0].yaw == w[1].yaw)
    }

    pub fn pose_at(&self, t: usize) -> Pose {
        let t = t as f64;
        let k = &self.motion;
        let (trans, yaw) = if t <= k[0].frame {
            (Vec3::from(k[0].translation), k[0].yaw)
        } else if t >= k[k.len() - 1].frame {
            let last = &k[k.len() - 1];
            (Vec3::from(last.translation), last.yaw)
        } else {
            let i = k.iter().rposition(|kf| kf.frame <= t).unwrap();
            let (a, b) = (&k[i], &k[i + 1]);
            let span = b.frame - a.frame;
            let (ta, tb) = (Vec3::from(a.translation), Vec3::from(b.translation));
            let trans = ta + (tb - ta) / span * (t - a.frame);
            let yaw = a.yaw + (b.yaw - a.yaw) / span * (t - a.frame);
            (trans, yaw)
        };
        Pose {
            rotation: *Rotation3::from_axis_angle(&Vector3::z_axis(), yaw).matrix(),
            translation: trans,
        }
    }

    /// Surface area, or `None` for unbounded shapes.
    pub fn area(&self) -> Option<f64> {
        match &self.shape {
            Shape::Sphere { radius } => Some(4.0 * std::f64::consts::PI * radius * radius),
            Shape::Cuboid { half: h } => Some(8.0 * (h[0] * h[1] + h[1] * h[2] + h[0] * h[2])),
            Shape::Plane { .. } => None,
        }
    }

    /// Uniform-by-area point on the surface, in body coordinates.
    pub fn sample_surface(&self, rng: &mut impl Rng) -> Option<Vec3> {
        match &self.shape {
            Shape::Sphere { radius } => loop {
                let v = Vec3::new(
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                );
                let n = v.norm();
                if n > 1e-12 {
                    return Some(v / n * *radius);
                }
            },
            Shape::Cuboid { half: h } => {
                let faces = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
                let total = 2.0 * (faces[0] + faces[1] + faces[2]);
                let mut pick = rng.random::<f64>() * total;
                let mut axis = 2;
                for (i, &a) in faces.iter().enumerate() {
                    if pick < 2.0 * a {
                        axis = i;
                        break;
                    }
                    pick -= 2.0 * a;
                }
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let mut p = Vec3::zeros();
                for i in 0..3 {
                    p[i] = if i == axis {
                        sign * h[i]
                    } else {
                        rng.random_range(-h[i]..h[i])
                    };
                }
                Some(p)
            }
            Shape::Plane { .. } => None,
        }
    }

    /// Nearest intersection with parameter `t > t_min` along `o + t d`.
    pub fn intersect(&self, frame: usize, o: &Vec3, d: &Vec3, t_min: f64) -> Option<Hit> {
        if let Shape::Plane { height } = self.shape {
            if d.z == 0.0 {
                return None;
            }
            let t = (height - o.z) / d.z;
            if t <= t_min {
                return None;
            }
            let p = o + d * t;
            return Some(Hit {
                t,
                body: 0,
                local: p,
                normal: Vec3::z(),
            });
        }
        let pose = self.pose_at(frame);
        let ol = pose.to_local(o);
        let dl = pose.rotation.transpose() * d;
        let (t, normal_local) = match &self.shape {
            Shape::Sphere { radius } => {
                let a = dl.dot(&dl);
                let b = 2.0 * ol.dot(&dl);
                let c = ol.dot(&ol) - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t0 = (-b - sq) / (2.0 * a);
                let t1 = (-b + sq) / (2.0 * a);
                let t = if t0 > t_min {
                    t0
                } else if t1 > t_min {
                    t1
                } else {
                    return None;
                };
                (t, (ol + dl * t) / *radius)
            }
            Shape::Cuboid { half } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                let mut near_axis = 0;
                let mut far_axis = 0;
                for i in 0..3 {
                    if dl[i] == 0.0 {
                        if ol[i].abs() > half[i] {
                            return None;
                        }
                        continue;
                    }
                    let a = (-half[i] - ol[i]) / dl[i];
                    let b = (half[i] - ol[i]) / dl[i];
                    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                    if lo > t_near {
                        t_near = lo;
                        near_axis = i;
                    }
                    if hi < t_far {
                        t_far = hi;
                        far_axis = i;
                    }
                }
                if t_near > t_far {
                    return None;
                }
                let (t, axis) = if t_near > t_min {
                    (t_near, near_axis)
                } else if t_far > t_min {
                    (t_far, far_axis)
                } else {
                    return None;
                };
                let p = ol + dl * t;
                let mut n = Vec3::zeros();
                n[axis] = p[axis].signum();
                (t, n)
            }
            Shape::Plane { .. } => unreachable!(),
        };
        Some(Hit {
            t,
            body: 0,
            local: ol + dl * t,
            normal: pose.rotation * normal_local,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub body: usize,
    /// Hit point in body coordinates (world coordinates for planes).
    pub local: Vec3,
    pub normal: Vec3,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub bodies: Vec<RigidBody>,
    pub n_frames: usize,
}

impl Scene {
    pub fn raycast(&self, frame: usize, o: &Vec3, d: &Vec3, t_min: f64) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, b) in self.bodies.iter().enumerate() {
            if let Some(mut h) = b.intersect(frame, o, d, t_min) {
                if best.as_ref().is_none_or(|bh| h.t < bh.t) {
                    h.body = i;
                    best = Some(h);
                }
            }
        }
        best
    }

    /// World direction through pixel `(u, v)` with unit camera-space depth,
    /// so the ray parameter of a hit equals its depth.
    fn pixel_dir(cam: &Camera, u: f64, v: f64) -> Vec3 {
        cam.rotation().transpose() * cam.pixel_ray(u, v)
    }

    /// Render color and depth for one camera at one frame.
    pub fn render(&self, cam: &Camera, frame: usize) -> Result<(RgbImage, DepthMap)> {
        let (w, h) = (cam.width, cam.height);
        if w == 0 || h == 0 {
            return Err(SimError::ZeroResolution { width: w, height: h });
        }
        let o = cam.center();
        let mut rgb = RgbImage::new(w, h);
        let mut depth = DepthMap::invalid(w, h);
        for v in 0..h {
            for u in 0..w {
                let d = Self::pixel_dir(cam, u as f64, v as f64);
                let Some(hit) = self.raycast(frame, &o, &d, RAY_EPS) else { continue };
                depth.data[v * w + u] = hit.t as f32;
                let albedo = self.bodies[hit.body].albedo.at(&hit.local);
                let cos = (hit.normal.dot(&d) / d.norm()).abs() as f32;
                let shade = 0.25 + 0.75 * cos;
                let px = &mut rgb.data[(v * w + u) * 3..(v * w + u) * 3 + 3];
                for c in 0..3 {
                    px[c] = (albedo[c] * shade * 255.0).round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        Ok((rgb, depth))
    }

    /// Whether world point `p` is in the frustum of `cam` and not occluded.
    pub fn visible_from(&self, cam: &Camera, frame: usize, p: &Vec3) -> bool {
        let Projection::Visible { pixel, depth, in_bounds } = cam.project_point(p) else {
            return false;
        };
        if !in_bounds {
            return false;
        }
        let d = Self::pixel_dir(cam, pixel[0], pixel[1]);
        match self.raycast(frame, &cam.center(), &d, RAY_EPS) {
            Some(hit) => hit.t >= depth - RAY_EPS,
            None => true,
        }
    }
}

/// Render every view at `frame`.
pub fn render_views(scene: &Scene, cams: &[ViewCameras], frame: usize) -> Result<Vec<(RgbImage, DepthMap)>> {
    if cams.is_empty() {
        return Err(SimError::NoCameras);
    }
    cams.iter().map(|vc| scene.render(vc.at(frame), frame)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthTrack {
    pub track_id: usize,
    pub t_q: usize,
    pub body_id: usize,
    pub local_point: Vec3,
    pub positions: Vec<Vec3>,
    pub visible: Vec<bool>,
}

impl GroundTruthTrack {
    pub fn query(&self) -> Vec3 {
        self.positions[self.t_q]
    }
}

/// Any-view visibility of `p` at `frame`.
pub fn any_view_visible(scene: &Scene, cams: &[ViewCameras], frame: usize, p: &Vec3) -> bool {
    cams.iter().any(|vc| scene.visible_from(vc.at(frame), frame, p))
}

/// Advect a body-frame point through every frame and label its visibility.
pub fn trace_point(scene: &Scene, cams: &[ViewCameras], body_id: usize, local: &Vec3) -> (Vec<Vec3>, Vec<bool>) {
    let body = &scene.bodies[body_id];
    let positions: Vec<Vec3> = (0..scene.n_frames).map(|t| body.pose_at(t).apply(local)).collect();
    let visible = positions
        .iter()
        .enumerate()
        .map(|(t, p)| any_view_visible(scene, cams, t, p))
        .collect();
    (positions, visible)
}

/// Sample `n_tracks` surface points uniformly by area over all bounded bodies.
/// Points never visible in any frame are rejected; `t_q` is drawn uniformly
/// from the frames where the point is visible.
pub fn sample_tracks(scene: &Scene, cams: &[ViewCameras], n_tracks: usize, seed: u64) -> Result<Vec<GroundTruthTrack>> {
    if n_tracks == 0 {
        return Err(SimError::NoTracks);
    }
    if cams.is_empty() {
        return Err(SimError::NoCameras);
    }
    let areas: Vec<(usize, f64)> = scene
        .bodies
        .iter()
        .enumerate()
        .filter_map(|(i, b)| b.area().map(|a| (i, a)))
        .collect();
    if areas.is_empty() {
        return Err(SimError::NoBodies);
    }
    let total: f64 = areas.iter().map(|a| a.1).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_attempts = 200 * n_tracks;
    let mut tracks = Vec::with_capacity(n_tracks);
    for _ in 0..max_attempts {
        if tracks.len() == n_tracks {
            break;
        }
        let mut pick = rng.random::<f64>() * total;
        let mut body_id = areas[areas.len() - 1].0;
        for &(i, a) in &areas {
            if pick < a {
                body_id = i;
                break;
            }
            pick -= a;
        }
        let local = scene.bodies[body_id].sample_surface(&mut rng).expect("bounded body");
        let (positions, visible) = trace_point(scene, cams, body_id, &local);
        let vis_frames: Vec<usize> = (0..visible.len()).filter(|&t| visible[t]).collect();
        if vis_frames.is_empty() {
            continue;
        }
        let t_q = vis_frames[rng.random_range(0..vis_frames.len())];
        tracks.push(GroundTruthTrack {
            track_id: tracks.len(),
            t_q,
            body_id,
            local_point: local,
            positions,
            visible,
        });
    }
    if tracks.len() < n_tracks {
        return Err(SimError::NotEnoughVisible {
            wanted: n_tracks,
            attempts: max_attempts,
        });
    }
    Ok(tracks)
}

/// Dataset generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_scenes: usize,
    pub n_views: usize,
    pub n_frames: usize,
    pub width: usize,
    pub height: usize,
    pub n_tracks: usize,
    pub seed: u64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Probability that an object does not move.
    pub static_fraction: f64,
    /// Per-frame translation cap for moving objects, world units.
    pub max_speed: f64,
    /// Per-frame yaw cap for moving objects, radians.
    pub max_yaw_rate: f64,
    /// Half-width of the square region objects start in.
    pub arena: f64,
    pub camera_distance: [f64; 2],
    pub camera_height: [f64; 2],
    pub fov_deg: f64,
    pub threshold_scale: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_scenes: 4,
            n_views: 4,
            n_frames: 24,
            width: 64,
            height: 64,
            n_tracks: 32,
            seed: 0,
            min_objects: 2,
            max_objects: 4,
            static_fraction: 0.4,
            max_speed: 0.015,
            max_yaw_rate: 0.03,
            arena: 0.35,
            camera_distance: [1.4, 1.8],
            camera_height: [0.6, 1.1],
            fov_deg: 55.0,
            threshold_scale: 1.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        if !(1..=8).contains(&self.n_views) {
            return bad(&format!("n_views must be in 1..=8, got {}", self.n_views));
        }
        if self.n_scenes == 0 || self.n_frames == 0 {
            return bad("n_scenes and n_frames must be positive");
        }
        if self.width == 0 || self.height == 0 {
            return Err(SimError::ZeroResolution {
                width: self.width,
                height: self.height,
            });
        }
        if self.n_tracks == 0 {
            return Err(SimError::NoTracks);
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("need 1 <= min_objects <= max_objects");
        }
        if !(0.0..=1.0).contains(&self.static_fraction) {
            return bad("static_fraction must be in [0, 1]");
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) || !(self.threshold_scale > 0.0) {
            return bad("fov_deg must be in (0, 180) and threshold_scale positive");
        }
        Ok(())
    }

    fn rng(&self, scene: usize, purpose: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(((scene as u64) << 8) | purpose);
        r
    }
}

/// A generated scene held in memory.
#[derive(Clone, Debug)]
pub struct SimScene {
    pub scene_id: usize,
    pub scene: Scene,
    pub cameras: Vec<ViewCameras>,
    pub tracks: Vec<GroundTruthTrack>,
}

fn random_color(rng: &mut impl Rng) -> [f32; 3] {
    [rng.random_range(0.15..1.0), rng.random_range(0.15..1.0), rng.random_range(0.15..1.0)]
}

/// Build scene `scene_id` of the dataset described by `cfg`.
pub fn generate_scene(cfg: &SimConfig, scene_id: usize) -> Result<SimScene> {
    cfg.validate()?;
    let mut rng = cfg.rng(scene_id, 0);
    let mut bodies = vec![RigidBody::new(
        Shape::Plane { height: 0.0 },
        vec![Keyframe {
            frame: 0.0,
            translation: [0.0; 3],
            yaw: 0.0,
        }],
        Albedo::Checker {
            a: [0.55, 0.55, 0.6],
            b: [0.3, 0.32, 0.3],
            cell: 0.2,
        },
    )?];
    let n_obj = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let last = (cfg.n_frames - 1) as f64;
    for _ in 0..n_obj {
        let (shape, lift) = if rng.random::<bool>() {
            let r = rng.random_range(0.08..0.16);
            (Shape::Sphere { radius: r }, r)
        } else {
            let h = [rng.random_range(0.05..0.12), rng.random_range(0.05..0.12), rng.random_range(0.05..0.12)];
            (Shape::Cuboid { half: h }, h[2])
        };
        let start = [rng.random_range(-cfg.arena..cfg.arena), rng.random_range(-cfg.arena..cfg.arena), lift];
        let yaw0 = rng.random_range(0.0..std::f64::consts::TAU);
        let mut motion = vec![Keyframe {
            frame: 0.0,
            translation: start,
            yaw: yaw0,
        }];
        if rng.random::<f64>() >= cfg.static_fraction && cfg.n_frames > 1 {
            let legs = if cfg.n_frames >= 6 { rng.random_range(1..=2) } else { 1 };
            let mut pos = start;
            let mut yaw = yaw0;
            for leg in 1..=legs {
                let frame = (last * leg as f64 / legs as f64).round();
                let dt = frame - motion[motion.len() - 1].frame;
                let speed = rng.random_range(0.3..1.0) * cfg.max_speed;
                let dir = rng.random_range(0.0..std::f64::consts::TAU);
                pos = [pos[0] + speed * dt * dir.cos(), pos[1] + speed * dt * dir.sin(), lift];
                yaw += rng.random_range(-cfg.max_yaw_rate..cfg.max_yaw_rate) * dt;
                motion.push(Keyframe {
                    frame,
                    translation: pos,
                    yaw,
                });
            }
        }
        let albedo = if rng.random::<f64>() < 0.7 {
            Albedo::Checker {
                a: random_color(&mut rng),
                b: random_color(&mut rng),
                cell: rng.random_range(0.03..0.07),
            }
        } else {
            Albedo::Solid {
                color: random_color(&mut rng),
                noise: 0.25,
                cell: 0.03,
            }
        };
        bodies.push(RigidBody::new(shape, motion, albedo)?);
    }
    let scene = Scene {
        bodies,
        n_frames: cfg.n_frames,
    };

    let mut cam_rng = cfg.rng(scene_id, 1);
    let base = cam_rng.random_range(0.0..std::f64::consts::TAU);
    let f = (cfg.width as f64 / 2.0) / (cfg.fov_deg.to_radians() / 2.0).tan();
    let k = intrinsics(f, f, (cfg.width as f64 - 1.0) / 2.0, (cfg.height as f64 - 1.0) / 2.0);
    let mut cameras = Vec::with_capacity(cfg.n_views);
    for v in 0..cfg.n_views {
        let az = base + std::f64::consts::TAU * v as f64 / cfg.n_views as f64 + cam_rng.random_range(-0.3..0.3);
        let dist = cam_rng.random_range(cfg.camera_distance[0]..=cfg.camera_distance[1]);
        let height = cam_rng.random_range(cfg.camera_height[0]..=cfg.camera_height[1]);
        let eye = Vec3::new(dist * az.cos(), dist * az.sin(), height);
        let target = Vec3::new(cam_rng.random_range(-0.05..0.05), cam_rng.random_range(-0.05..0.05), 0.05);
        let cam = Camera::new(v as u32, k, look_at(eye, target, Vec3::z()), cfg.width, cfg.height)?;
        cameras.push(ViewCameras::fixed(cam));
    }

    let track_seed = cfg.rng(scene_id, 2).random::<u64>();
    let tracks = sample_tracks(&scene, &cameras, cfg.n_tracks, track_seed)?;
    Ok(SimScene {
        scene_id,
        scene,
        cameras,
        tracks,
    })
}

impl SimScene {
    pub fn manifest(&self, cfg: &SimConfig) -> SceneManifest {
        SceneManifest {
            scene_id: self.scene_id,
            units: "m".into(),
            n_views: self.cameras.len(),
            n_frames: self.scene.n_frames,
            width: cfg.width,
            height: cfg.height,
            n_tracks: self.tracks.len(),
            seed: cfg.seed,
            threshold_scale: cfg.threshold_scale,
            depth_source: "simulated".into(),
        }
    }

    pub fn gt_rows(&self) -> Vec<GtRow> {
        let mut rows = Vec::new();
        for tr in &self.tracks {
            for (t, (p, &v)) in tr.positions.iter().zip(&tr.visible).enumerate() {
                rows.push(GtRow {
                    track_id: tr.track_id,
                    t,
                    xyz: [p.x, p.y, p.z],
                    visible: v,
                });
            }
        }
        rows
    }

    pub fn query_rows(&self) -> Vec<QueryRow> {
        self.tracks
            .iter()
            .map(|tr| {
                let q = tr.query();
                QueryRow {
                    track_id: tr.track_id,
                    t_q: tr.t_q,
                    xyz: [q.x, q.y, q.z],
                }
            })
            .collect()
    }

    /// Render all frames of all views, indexed `[view][frame]`.
    pub fn render_all(&self) -> Result<Vec<Vec<(RgbImage, DepthMap)>>> {
        let jobs: Vec<(usize, usize)> = (0..self.cameras.len())
            .flat_map(|v| (0..self.scene.n_frames).map(move |t| (v, t)))
            .collect();
        let rendered: Vec<(RgbImage, DepthMap)> = jobs
            .par_iter()
            .map(|&(v, t)| self.scene.render(self.cameras[v].at(t), t))
            .collect::<Result<_>>()?;
        let mut it = rendered.into_iter();
        Ok((0..self.cameras.len())
            .map(|_| (0..self.scene.n_frames).map(|_| it.next().unwrap()).collect())
            .collect())
    }

    /// Write this scene in the on-disk layout under `dir`.
    pub fn write(&self, cfg: &SimConfig, dir: &Path) -> Result<()> {
        io::create_dir(dir)?;
        io::write_json(&dir.join("manifest.json"), &self.manifest(cfg))?;
        io::write_cameras(&dir.join("cameras.json"), &self.cameras)?;
        let frames = self.render_all()?;
        for (v, per_view) in frames.iter().enumerate() {
            let rgb_dir = dir.join("rgb").join(format!("view{v}"));
            let depth_dir = dir.join("depth").join(format!("view{v}"));
            io::create_dir(&rgb_dir)?;
            io::create_dir(&depth_dir)?;
            for (t, (rgb, depth)) in per_view.iter().enumerate() {
                io::write_ppm(&rgb_dir.join(io::frame_name(t, "ppm")), rgb)?;
                io::write_depth(&depth_dir.join(io::frame_name(t, "mvd")), depth)?;
            }
        }
        io::write_gt_tracks(&dir.join("gt_tracks.csv"), &self.gt_rows())?;
        io::write_queries(&dir.join("queries.csv"), &self.query_rows())?;
        Ok(())
    }
}

/// Top-level manifest written as `dataset.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: SimConfig,
    pub scenes: Vec<String>,
}

pub fn scene_dir_name(scene_id: usize) -> String {
    format!("scene_{scene_id:04}")
}

/// Generate and write every scene of `cfg` under `out_dir`.
pub fn generate_dataset(cfg: &SimConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    io::create_dir(out_dir)?;
    let mut scenes = Vec::with_capacity(cfg.n_scenes);
    for id in 0..cfg.n_scenes {
        let sim = generate_scene(cfg, id)?;
        let name = scene_dir_name(id);
        sim.write(cfg, &out_dir.join(&name))?;
        scenes.push(name);
    }
    let manifest = DatasetManifest {
        config: cfg.clone(),
        scenes,
    };
    io::write_json(&out_dir.join("dataset.json"), &manifest)?;
    Ok(manifest)
}

/// Scene directories listed in `dataset.json`, or every `scene_*` subdirectory.
pub fn list_scenes(dataset_dir: &Path) -> Result<Vec<PathBuf>> {
    let manifest_path = dataset_dir.join("dataset.json");
    if manifest_path.exists() {
        let m: DatasetManifest = io::read_json(&manifest_path)?;
        return Ok(m.scenes.iter().map(|s| dataset_dir.join(s)).collect());
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(dataset_dir)
        .map_err(|e| IoError::io(dataset_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("scene_")))
        .collect();
    dirs.sort();
    Ok(dirs)
}
