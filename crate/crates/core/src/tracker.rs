//! Token construction, the iterative transformer refiner and sliding-window inference.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correlation::{correlate_on_tape, neighbor_batch, CorrelationConfig};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::fusion::{fuse_geometry, level_stride, CloudGeometry, ViewInput};
use crate::geometry::{DepthMap, Similarity};
use crate::io::{self, PredRow, QueryRow, RgbImage, SceneData, ViewCameras};
use crate::nn::{Linear, Mlp, Norm};
use crate::scenesim::SimScene;
use crate::tensor::{sinusoidal_width, ParamId, ParamStore, Real, Tape, Tensor, Var};

const MASKED: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    pub encoder: EncoderConfig,
    pub correlation: CorrelationConfig,
    /// Frequencies of the displacement encoding.
    pub num_freqs: usize,
    /// Multiplier on `p - p_q` before the displacement encoding.
    pub disp_scale: f64,
    pub hidden: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub mlp_ratio: usize,
    /// Transformer blocks; even ones attend over time, odd ones through the virtual tracks.
    pub layers: usize,
    pub virtual_tracks: usize,
    /// Refinement iterations `M`.
    pub iterations: usize,
    /// Window length `T`.
    pub window: usize,
    /// World units per unit of the position-update head.
    pub pos_scale: f64,
    /// Start the update head at zero so an untrained model leaves estimates in place.
    pub zero_init_head: bool,
    pub vis_threshold: f64,
    /// Feed the current estimate into the tokens as a constant, so gradients reach
    /// earlier iterations only through the additive updates.
    pub detach_tokens: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            correlation: CorrelationConfig {
                offset_scale: 10.0,
                ..CorrelationConfig::default()
            },
            num_freqs: 10,
            disp_scale: 1.0,
            hidden: 256,
            heads: 6,
            head_dim: 32,
            mlp_ratio: 4,
            layers: 6,
            virtual_tracks: 64,
            iterations: 4,
            window: 12,
            pos_scale: 0.1,
            zero_init_head: true,
            vis_threshold: 0.5,
            detach_tokens: true,
        }
    }
}

impl TrackerConfig {
    /// A small model that trains in minutes on one core.
    pub fn toy() -> Self {
        Self {
            encoder: EncoderConfig {
                stem_width: 16,
                width: 32,
                blocks: 1,
                dim: 32,
                levels: 4,
            },
            hidden: 64,
            heads: 2,
            head_dim: 32,
            mlp_ratio: 2,
            layers: 4,
            virtual_tracks: 16,
            ..Self::default()
        }
    }

    pub fn token_width(&self) -> usize {
        sinusoidal_width(self.num_freqs) + self.encoder.dim + self.correlation.width(self.encoder.levels) + 1
    }

    pub fn validate(&self) -> Result<()> {
        self.correlation.validate()?;
        if self.num_freqs == 0 || self.num_freqs > 30 {
            return Err(Error::invalid("num_freqs must be in 1..=30"));
        }
        if self.hidden == 0 || self.heads == 0 || self.head_dim == 0 || self.mlp_ratio == 0 {
            return Err(Error::invalid("transformer sizes must be positive"));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("iterations M must be >= 1"));
        }
        if self.window < 2 || !self.window.is_multiple_of(2) {
            return Err(Error::invalid(format!("window T must be even and >= 2, got {}", self.window)));
        }
        if !(self.pos_scale > 0.0 && self.disp_scale > 0.0) {
            return Err(Error::invalid("pos_scale and disp_scale must be positive"));
        }
        Ok(())
    }
}

/// Multi-view RGB-D video, indexed `[view][frame]`.
#[derive(Clone, Debug)]
pub struct Video {
    pub cameras: Vec<ViewCameras>,
    pub rgb: Vec<Vec<RgbImage>>,
    pub depth: Vec<Vec<DepthMap>>,
}

impl Video {
    pub fn from_scene(s: &SceneData) -> Self {
        Self {
            cameras: s.cameras.clone(),
            rgb: s.rgb.clone(),
            depth: s.depth.clone(),
        }
    }

    pub fn from_sim(s: &SimScene) -> Result<Self> {
        let frames = s.render_all()?;
        let (rgb, depth) = frames.into_iter().map(|v| v.into_iter().unzip()).unzip();
        Ok(Self {
            cameras: s.cameras.clone(),
            rgb,
            depth,
        })
    }

    pub fn n_views(&self) -> usize {
        self.cameras.len()
    }

    pub fn n_frames(&self) -> usize {
        self.rgb.first().map_or(0, Vec::len)
    }

    /// The first `n` frames.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.n_frames());
        Self {
            cameras: self
                .cameras
                .iter()
                .map(|vc| ViewCameras {
                    view_id: vc.view_id,
                    frames: if vc.per_frame { vc.frames[..n].to_vec() } else { vc.frames.clone() },
                    per_frame: vc.per_frame,
                })
                .collect(),
            rgb: self.rgb.iter().map(|v| v[..n].to_vec()).collect(),
            depth: self.depth.iter().map(|v| v[..n].to_vec()).collect(),
        }
    }

    /// Image size `(height, width)`.
    pub fn size(&self) -> (usize, usize) {
        self.rgb.first().and_then(|v| v.first()).map_or((0, 0), |i| (i.height, i.width))
    }

    pub fn validate(&self) -> Result<()> {
        let (v, f) = (self.n_views(), self.n_frames());
        if v == 0 || f == 0 {
            return Err(Error::invalid("video needs at least one view and one frame"));
        }
        if self.rgb.len() != v || self.depth.len() != v {
            return Err(Error::invalid("inconsistent view counts"));
        }
        let (h, w) = self.size();
        for vi in 0..v {
            if self.rgb[vi].len() != f || self.depth[vi].len() != f {
                return Err(Error::invalid(format!("view {vi} has a different frame count")));
            }
            for t in 0..f {
                let (img, d) = (&self.rgb[vi][t], &self.depth[vi][t]);
                if (img.height, img.width) != (h, w) || (d.height, d.width) != (h, w) {
                    return Err(Error::invalid(format!("view {vi} frame {t} has a different size")));
                }
            }
        }
        Ok(())
    }

    /// Keep the listed views in the given order.
    pub fn select_views(&self, views: &[usize]) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::invalid("select at least one view"));
        }
        if let Some(&bad) = views.iter().find(|&&v| v >= self.n_views()) {
            return Err(Error::invalid(format!("view {bad} out of {}", self.n_views())));
        }
        Ok(Self {
            cameras: views.iter().map(|&v| self.cameras[v].clone()).collect(),
            rgb: views.iter().map(|&v| self.rgb[v].clone()).collect(),
            depth: views.iter().map(|&v| self.depth[v].clone()).collect(),
        })
    }

    /// The same video in a world moved by `s`; depths scale by `s.scale`.
    pub fn transformed(&self, s: &Similarity) -> Result<Self> {
        let mut cameras = Vec::with_capacity(self.n_views());
        for vc in &self.cameras {
            let frames = vc.frames.iter().map(|c| c.apply_similarity(s)).collect::<Result<Vec<_>, _>>()?;
            cameras.push(ViewCameras {
                view_id: vc.view_id,
                frames,
                per_frame: vc.per_frame,
            });
        }
        let k = s.scale as f32;
        let depth = self
            .depth
            .iter()
            .map(|v| {
                v.iter()
                    .map(|d| DepthMap {
                        width: d.width,
                        height: d.height,
                        data: d.data.iter().map(|&z| if z.is_finite() && z > 0.0 { z * k } else { z }).collect(),
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            cameras,
            rgb: self.rgb.clone(),
            depth,
        })
    }
}

/// Fused cloud geometry for every frame and scale of a video.
///
/// Feature rows index the flattened level tensor whose images are ordered
/// `frame * n_views + view`.
#[derive(Clone, Debug)]
pub struct PreparedVideo {
    pub n_views: usize,
    pub n_frames: usize,
    /// `(h_s, w_s)` of each pyramid level.
    pub grids: Vec<(usize, usize)>,
    /// `[frame][scale]`.
    pub clouds: Vec<Vec<CloudGeometry>>,
}

impl PreparedVideo {
    pub fn new(video: &Video, levels: usize) -> Result<Self> {
        video.validate()?;
        let (h, w) = video.size();
        let n_views = video.n_views();
        let grids: Vec<(usize, usize)> = (0..levels).map(|s| (h / level_stride(s), w / level_stride(s))).collect();
        if grids.iter().any(|&(gh, gw)| gh == 0 || gw == 0 || gh * level_stride(0) > h) {
            return Err(Error::invalid(format!("{h}x{w} frames are too small for {levels} levels")));
        }
        let clouds = (0..video.n_frames())
            .into_par_iter()
            .map(|t| {
                grids
                    .iter()
                    .map(|&(gh, gw)| {
                        let views: Vec<ViewInput> = (0..n_views)
                            .map(|v| ViewInput {
                                camera: video.cameras[v].at(t),
                                depth: &video.depth[v][t],
                                feature_base: (t * n_views + v) * gh * gw,
                            })
                            .collect();
                        let g = fuse_geometry(&views, gh, gw)?;
                        if g.is_empty() {
                            return Err(Error::EmptyCloud);
                        }
                        Ok(g)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            n_views,
            n_frames: video.n_frames(),
            grids,
            clouds,
        })
    }
}

/// Multi-head attention over `[B, S, hidden]` sequences.
#[derive(Clone, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    head_dim: usize,
}

impl Attention {
    fn new(store: &mut ParamStore, name: &str, cfg: &TrackerConfig, rng: &mut impl Rng) -> Result<Self> {
        let inner = cfg.heads * cfg.head_dim;
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), cfg.hidden, inner, true, rng)?,
            k: Linear::new(store, &format!("{name}.k"), cfg.hidden, inner, true, rng)?,
            v: Linear::new(store, &format!("{name}.v"), cfg.hidden, inner, true, rng)?,
            o: Linear::new(store, &format!("{name}.o"), inner, cfg.hidden, true, rng)?,
            heads: cfg.heads,
            head_dim: cfg.head_dim,
        })
    }

    fn split<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let x = tape.reshape(x, &[s[0], s[1], self.heads, self.head_dim])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        Ok(tape.reshape(x, &[s[0] * self.heads, s[1], self.head_dim])?)
    }

    /// `mask` is additive, `[B * heads, Sq, Sk]`.
    fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        xq: Var,
        xkv: Var,
        mask: Option<Var>,
    ) -> Result<Var> {
        let (b, sq) = (tape.shape(xq)[0], tape.shape(xq)[1]);
        let q = self.q.forward(tape, store, xq)?;
        let k = self.k.forward(tape, store, xkv)?;
        let v = self.v.forward(tape, store, xkv)?;
        let (q, k, v) = (self.split(tape, q)?, self.split(tape, k)?, self.split(tape, v)?);
        let s = tape.bmm(q, k, true)?;
        let mut s = tape.scale(s, 1.0 / (self.head_dim as f64).sqrt())?;
        if let Some(m) = mask {
            s = tape.add(s, m)?;
        }
        let a = tape.softmax(s)?;
        let o = tape.bmm(a, v, false)?;
        let o = tape.reshape(o, &[b, self.heads, sq, self.head_dim])?;
        let o = tape.permute(o, &[0, 2, 1, 3])?;
        let o = tape.reshape(o, &[b, sq, self.heads * self.head_dim])?;
        Ok(self.o.forward(tape, store, o)?)
    }
}

/// Pre-norm attention plus MLP with residuals.
#[derive(Clone, Debug)]
struct Sublayer {
    nq: Norm,
    nkv: Option<Norm>,
    attn: Attention,
    nm: Norm,
    mlp: Mlp,
}

impl Sublayer {
    fn new(store: &mut ParamStore, name: &str, cfg: &TrackerConfig, cross: bool, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            nq: Norm::new(store, &format!("{name}.nq"), cfg.hidden)?,
            nkv: if cross {
                Some(Norm::new(store, &format!("{name}.nkv"), cfg.hidden)?)
            } else {
                None
            },
            attn: Attention::new(store, &format!("{name}.attn"), cfg, rng)?,
            nm: Norm::new(store, &format!("{name}.nm"), cfg.hidden)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), cfg.hidden, cfg.hidden * cfg.mlp_ratio, rng)?,
        })
    }

    fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        kv: Option<Var>,
        mask: Option<Var>,
    ) -> Result<Var> {
        let q = self.nq.forward(tape, store, x)?;
        let kv = match (kv, &self.nkv) {
            (Some(kv), Some(n)) => n.forward(tape, store, kv)?,
            _ => q,
        };
        let a = self.attn.forward(tape, store, q, kv, mask)?;
        let x = tape.add(x, a)?;
        let h = self.nm.forward(tape, store, x)?;
        let h = self.mlp.forward(tape, store, h)?;
        Ok(tape.add(x, h)?)
    }
}

#[derive(Clone, Debug)]
enum Block {
    /// Self-attention along time for every real and virtual track.
    Temporal(Sublayer),
    /// Per frame: virtual tracks read the real ones, then real tracks read the virtual ones.
    Cross { gather: Sublayer, scatter: Sublayer },
}

/// The full model: image encoder plus the iterative refiner.
#[derive(Clone, Debug)]
pub struct Tracker {
    pub config: TrackerConfig,
    pub encoder: Encoder,
    input: Linear,
    virtual_tokens: ParamId,
    blocks: Vec<Block>,
    head_norm: Norm,
    head: Linear,
    vis: Linear,
}

impl Tracker {
    pub fn new(config: &TrackerConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = config;
        let encoder = Encoder::new(&c.encoder, store, rng)?;
        let input = Linear::new(store, "trk.input", c.token_width(), c.hidden, true, rng)?;
        let virtual_tokens = store.add_normal("trk.virtual", &[c.virtual_tracks.max(1), c.hidden], 1.0, rng)?;
        let mut blocks = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let name = format!("trk.block{l}");
            blocks.push(if l % 2 == 0 {
                Block::Temporal(Sublayer::new(store, &name, c, false, rng)?)
            } else {
                Block::Cross {
                    gather: Sublayer::new(store, &format!("{name}.gather"), c, true, rng)?,
                    scatter: Sublayer::new(store, &format!("{name}.scatter"), c, true, rng)?,
                }
            });
        }
        let head_norm = Norm::new(store, "trk.head.norm", c.hidden)?;
        let head_std = if c.zero_init_head { 0.0 } else { 1.0 / (c.hidden as f64).sqrt() };
        let head = Linear::with_std(store, "trk.head", c.hidden, 3 + c.encoder.dim, true, head_std, rng)?;
        let vis = Linear::new(store, "trk.vis", c.encoder.dim, 1, true, rng)?;
        Ok(Self {
            config: c.clone(),
            encoder,
            input,
            virtual_tokens,
            blocks,
            head_norm,
            head,
            vis,
        })
    }

    /// Encode every image; returns one flattened `[images * h_s * w_s, d]` tensor per level.
    pub fn encode_video<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, video: &Video) -> Result<Vec<Var>> {
        let (v, f) = (video.n_views(), video.n_frames());
        let images: Vec<&RgbImage> = (0..f).flat_map(|t| (0..v).map(move |vi| (t, vi))).map(|(t, vi)| &video.rgb[vi][t]).collect();
        let levels = self.encoder.encode(tape, store, &images)?;
        let d = self.config.encoder.dim;
        levels
            .into_iter()
            .map(|l| {
                let n = tape.value(l).numel() / d;
                Ok(tape.reshape(l, &[n, d])?)
            })
            .collect()
    }

    /// Tokens `[rows, token_width]` for window rows.
    ///
    /// `positions` are the values of `p` used for neighbor lookup, with the
    /// query frames pinned to the exact query.
    #[allow(clippy::too_many_arguments)]
    fn tokens<T: Real>(
        &self,
        tape: &mut Tape<T>,
        levels: &[Var],
        prepared: &PreparedVideo,
        rows: &[Row],
        queries: &[QueryRow],
        p: Var,
        positions: &[[f64; 3]],
        feats: Var,
        logits: &[f64],
    ) -> Result<Var> {
        let c = &self.config;
        let n = rows.len();
        let q: Vec<f64> = rows.iter().flat_map(|r| queries[r.track].xyz).collect();
        let q = tape.constant(Tensor::from_f64(&[n, 3], &q)?);
        let p = if c.detach_tokens {
            let v = tape.value(p).clone();
            tape.constant(v)
        } else {
            p
        };
        let disp = tape.sub(p, q)?;
        let disp = tape.scale(disp, c.disp_scale)?;
        let eta = tape.sinusoid(disp, c.num_freqs)?;
        let mut parts = vec![eta, feats];
        for (s, &level) in levels.iter().enumerate() {
            let clouds: Vec<&CloudGeometry> = rows.iter().map(|r| &prepared.clouds[r.frame][s]).collect();
            let batch = neighbor_batch(&clouds, positions, &c.correlation)?;
            parts.push(correlate_on_tape(tape, level, feats, p, &batch, &c.correlation)?);
        }
        parts.push(tape.constant(Tensor::from_f64(&[n, 1], logits)?));
        Ok(tape.concat(&parts)?)
    }

    /// One refinement pass: `(delta_p, delta_f)` for `[na * tw]` rows.
    #[allow(clippy::too_many_arguments)]
    fn refine_step<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        tokens: Var,
        na: usize,
        tw: usize,
        active: &[bool],
    ) -> Result<(Var, Var)> {
        let c = &self.config;
        let (h, nv) = (c.hidden, c.virtual_tracks);
        let x = self.input.forward(tape, store, tokens)?;
        let x = tape.reshape(x, &[na, tw, h])?;
        let pe = time_embedding(tw, h);
        let pe_real = tape.constant(repeat_rows::<T>(&pe, na, &[na, tw, h])?);
        let mut x = tape.add(x, pe_real)?;
        let mut z = if nv > 0 {
            let vt = tape.param(store, self.virtual_tokens);
            let idx: Vec<usize> = (0..nv).flat_map(|v| std::iter::repeat_n(v, tw)).collect();
            let z = tape.gather_rows(vt, &idx)?;
            let z = tape.reshape(z, &[nv, tw, h])?;
            let pe_virt = tape.constant(repeat_rows::<T>(&pe, nv, &[nv, tw, h])?);
            Some(tape.add(z, pe_virt)?)
        } else {
            None
        };
        let heads = c.heads;
        let temporal_mask = {
            let mut m = Vec::with_capacity((na + nv) * heads * tw * tw);
            for b in 0..na + nv {
                for _ in 0..heads {
                    for _ in 0..tw {
                        for k in 0..tw {
                            let ok = b >= na || active[b * tw + k];
                            m.push(if ok { 0.0 } else { MASKED });
                        }
                    }
                }
            }
            tape.constant(Tensor::from_f64(&[(na + nv) * heads, tw, tw], &m)?)
        };
        let gather_mask = if nv > 0 {
            let mut m = Vec::with_capacity(tw * heads * nv * na);
            for t in 0..tw {
                for _ in 0..heads * nv {
                    for a in 0..na {
                        m.push(if active[a * tw + t] { 0.0 } else { MASKED });
                    }
                }
            }
            Some(tape.constant(Tensor::from_f64(&[tw * heads, nv, na], &m)?))
        } else {
            None
        };
        for block in &self.blocks {
            match block {
                Block::Temporal(layer) => {
                    let all = match z {
                        Some(z) => tape.concat_rows(&[x, z])?,
                        None => x,
                    };
                    let all = layer.forward(tape, store, all, None, Some(temporal_mask))?;
                    if nv > 0 {
                        x = tape.gather_rows(all, &(0..na).collect::<Vec<_>>())?;
                        z = Some(tape.gather_rows(all, &(na..na + nv).collect::<Vec<_>>())?);
                    } else {
                        x = all;
                    }
                }
                Block::Cross { gather, scatter } => {
                    let Some(zv) = z else { continue };
                    let xt = tape.permute(x, &[1, 0, 2])?;
                    let zt = tape.permute(zv, &[1, 0, 2])?;
                    let zt = gather.forward(tape, store, zt, Some(xt), gather_mask)?;
                    let xt = scatter.forward(tape, store, xt, Some(zt), None)?;
                    x = tape.permute(xt, &[1, 0, 2])?;
                    z = Some(tape.permute(zt, &[1, 0, 2])?);
                }
            }
        }
        let x = tape.reshape(x, &[na * tw, h])?;
        let x = self.head_norm.forward(tape, store, x)?;
        let out = self.head.forward(tape, store, x)?;
        let dp = tape.narrow(out, 0, 3)?;
        let dp = tape.scale(dp, c.pos_scale)?;
        let df = tape.narrow(out, 3, c.encoder.dim)?;
        Ok((dp, df))
    }

    /// Visibility logits `[rows, 1]` from features.
    pub fn visibility<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, feats: Var) -> Result<Var> {
        Ok(self.vis.forward(tape, store, feats)?)
    }

    /// Refine all windows of a video on `tape`.
    ///
    /// `levels` come from [`Tracker::encode_video`] on the same tape.
    pub fn forward_windows<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        levels: &[Var],
        prepared: &PreparedVideo,
        queries: &[QueryRow],
    ) -> Result<Forward> {
        let c = &self.config;
        let len = prepared.n_frames;
        validate_queries(queries, len)?;
        let n = queries.len();
        if n == 0 {
            return Ok(Forward {
                n_frames: len,
                positions: Vec::new(),
                logits: Vec::new(),
                windows: window_ranges(len, c.window),
                traces: Vec::new(),
            });
        }
        if levels.len() != prepared.grids.len() {
            return Err(Error::invalid("feature levels and prepared clouds disagree"));
        }
        let d = c.encoder.dim;

        // track features from the nearest level-1 point at the query frame
        let mut init_rows = Vec::with_capacity(n);
        for q in queries {
            let nn = prepared.clouds[q.t_q][0].knn(&q.xyz, 1)?;
            init_rows.push(prepared.clouds[q.t_q][0].feature_rows[nn[0].index]);
        }
        let f0 = tape.gather_rows(levels[0], &init_rows)?;
        let rep: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, len)).collect();
        let mut fg = tape.gather_rows(f0, &rep)?;
        let p0: Vec<f64> = queries.iter().flat_map(|q| (0..len).flat_map(move |_| q.xyz)).collect();
        let mut pg = tape.constant(Tensor::from_f64(&[n * len, 3], &p0)?);
        let mut logits_g = vec![0.0; n * len];

        let windows = window_ranges(len, c.window);
        let mut traces = Vec::with_capacity(windows.len());
        for (j, &(s, e)) in windows.iter().enumerate() {
            let tw = e - s;
            let tracks: Vec<usize> = (0..n).filter(|&i| queries[i].t_q < e).collect();
            if tracks.is_empty() {
                continue;
            }
            let na = tracks.len();
            let rows: Vec<Row> = tracks
                .iter()
                .flat_map(|&tr| (s..e).map(move |t| Row { track: tr, frame: t }))
                .collect();
            let gidx: Vec<usize> = rows.iter().map(|r| r.track * len + r.frame).collect();
            let active: Vec<bool> = rows.iter().map(|r| r.frame >= queries[r.track].t_q).collect();
            let moving: Vec<f64> = rows
                .iter()
                .flat_map(|r| [if r.frame > queries[r.track].t_q { 1.0 } else { 0.0 }; 3])
                .collect();
            let fmask: Vec<f64> = rows
                .iter()
                .flat_map(|r| std::iter::repeat_n(if r.frame >= queries[r.track].t_q { 1.0 } else { 0.0 }, d))
                .collect();
            let moving = tape.constant(Tensor::from_f64(&[rows.len(), 3], &moving)?);
            let fmask = tape.constant(Tensor::from_f64(&[rows.len(), d], &fmask)?);
            let window_logits: Vec<f64> = gidx.iter().map(|&g| logits_g[g]).collect();

            let mut p = tape.gather_rows(pg, &gidx)?;
            let mut f = tape.gather_rows(fg, &gidx)?;
            let mut iters = Vec::with_capacity(c.iterations);
            for m in 1..=c.iterations {
                let mut pv = rows3(tape.value(p));
                pin(&mut pv, &rows, queries);
                let tok = self.tokens(tape, levels, prepared, &rows, queries, p, &pv, f, &window_logits)?;
                let (dp, df) = self.refine_step(tape, store, tok, na, tw, &active)?;
                let dp = tape.mul(dp, moving)?;
                let df = tape.mul(df, fmask)?;
                p = tape.add(p, dp)?;
                f = tape.add(f, df)?;
                if !tape.value(p).is_finite() || !tape.value(f).is_finite() {
                    return Err(Error::Divergence(format!("non-finite update in window {j}, iteration {m}")));
                }
                iters.push(p);
            }
            let vis = self.visibility(tape, store, f)?;
            let lv: Vec<f64> = tape.value(vis).data().iter().map(|x| x.as_f64()).collect();
            if lv.iter().any(|x| !x.is_finite()) {
                return Err(Error::Divergence(format!("non-finite visibility in window {j}")));
            }

            // later windows overwrite; frames past the window carry the last estimate
            let base = n * len;
            let mut map: Vec<usize> = (0..n * len).collect();
            for (a, &tr) in tracks.iter().enumerate() {
                for t in s..len {
                    let local = (t.min(e - 1)) - s;
                    map[tr * len + t] = base + a * tw + local;
                    if t < e {
                        logits_g[tr * len + t] = lv[a * tw + local];
                    }
                }
            }
            let cat = tape.concat_rows(&[pg, p])?;
            pg = tape.gather_rows(cat, &map)?;
            let cat = tape.concat_rows(&[fg, f])?;
            fg = tape.gather_rows(cat, &map)?;
            traces.push(WindowTrace {
                window: j,
                start: s,
                end: e,
                tracks,
                positions: iters,
                logits: vis,
            });
        }
        let mut pv = rows3(tape.value(pg));
        let all: Vec<Row> = (0..n).flat_map(|tr| (0..len).map(move |t| Row { track: tr, frame: t })).collect();
        pin(&mut pv, &all, queries);
        Ok(Forward {
            n_frames: len,
            positions: (0..n).map(|i| pv[i * len..(i + 1) * len].to_vec()).collect(),
            logits: (0..n).map(|i| logits_g[i * len..(i + 1) * len].to_vec()).collect(),
            windows,
            traces,
        })
    }

    /// Inference on a whole video.
    pub fn track(&self, store: &ParamStore, video: &Video, queries: &[QueryRow]) -> Result<Forward> {
        let prepared = PreparedVideo::new(video, self.config.encoder.levels)?;
        self.track_prepared(store, video, &prepared, queries)
    }

    pub fn track_prepared(
        &self,
        store: &ParamStore,
        video: &Video,
        prepared: &PreparedVideo,
        queries: &[QueryRow],
    ) -> Result<Forward> {
        validate_queries(queries, video.n_frames())?;
        let mut tape = Tape::<f32>::inference();
        let levels = self.encode_video(&mut tape, store, video)?;
        self.forward_windows(&mut tape, store, &levels, prepared, queries)
    }
}

/// Sinusoidal frame-index embedding `[tw, h]`.
fn time_embedding(tw: usize, h: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(tw * h);
    for t in 0..tw {
        for i in 0..h {
            let freq = 1.0 / 100f64.powf((i / 2 * 2) as f64 / h as f64);
            let a = t as f64 * freq;
            out.push(if i % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    out
}

fn repeat_rows<T: Real>(block: &[f64], times: usize, shape: &[usize]) -> Result<Tensor<T>> {
    let data: Vec<f64> = (0..times).flat_map(|_| block.iter().copied()).collect();
    Ok(Tensor::from_f64(shape, &data)?)
}

fn rows3<T: Real>(t: &Tensor<T>) -> Vec<[f64; 3]> {
    t.data().chunks(3).map(|r| [r[0].as_f64(), r[1].as_f64(), r[2].as_f64()]).collect()
}

/// Frames up to the query frame hold the query position exactly; tensors only keep it to f32.
fn pin(positions: &mut [[f64; 3]], rows: &[Row], queries: &[QueryRow]) {
    for (p, r) in positions.iter_mut().zip(rows) {
        let q = &queries[r.track];
        if r.frame <= q.t_q {
            *p = q.xyz;
        }
    }
}

/// One (track, frame) slot of a window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Row {
    pub track: usize,
    pub frame: usize,
}

/// What one window computed, kept for the losses.
#[derive(Clone, Debug)]
pub struct WindowTrace {
    pub window: usize,
    pub start: usize,
    pub end: usize,
    /// Active tracks, in row-major order of the window tensors.
    pub tracks: Vec<usize>,
    /// Positions `[tracks * (end - start), 3]` after each iteration.
    pub positions: Vec<Var>,
    /// Final visibility logits `[tracks * (end - start), 1]`.
    pub logits: Var,
}

/// Output of [`Tracker::forward_windows`].
#[derive(Clone, Debug)]
pub struct Forward {
    pub n_frames: usize,
    /// `[track][frame]`.
    pub positions: Vec<Vec<[f64; 3]>>,
    pub logits: Vec<Vec<f64>>,
    pub windows: Vec<(usize, usize)>,
    pub traces: Vec<WindowTrace>,
}

impl Forward {
    pub fn visibility(&self, threshold: f64) -> Vec<Vec<bool>> {
        self.logits.iter().map(|l| predict_visibility(l, threshold)).collect()
    }

    /// Prediction rows for frames `t >= t_q` of every track.
    pub fn rows(&self, queries: &[QueryRow], threshold: f64) -> Vec<PredRow> {
        let mut out = Vec::new();
        for (i, q) in queries.iter().enumerate() {
            for t in q.t_q..self.n_frames {
                let conf = sigmoid(self.logits[i][t]);
                out.push(PredRow {
                    track_id: q.track_id,
                    t,
                    xyz: self.positions[i][t],
                    visible: conf >= threshold,
                    confidence: conf,
                });
            }
        }
        out
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `true` iff `sigmoid(logit) >= threshold`.
pub fn predict_visibility(logits: &[f64], threshold: f64) -> Vec<bool> {
    logits.iter().map(|&l| sigmoid(l) >= threshold).collect()
}

/// `[start, end)` frame ranges of the sliding windows.
pub fn window_ranges(len: usize, window: usize) -> Vec<(usize, usize)> {
    if len <= window {
        return vec![(0, len)];
    }
    let stride = window / 2;
    let j = (len - window).div_ceil(stride) + 1;
    (0..j).map(|i| (i * stride, (i * stride + window).min(len))).collect()
}

/// Every query must lie inside the video; all offenders are listed.
pub fn validate_queries(queries: &[QueryRow], n_frames: usize) -> Result<()> {
    let bad: Vec<String> = queries
        .iter()
        .filter(|q| q.t_q >= n_frames || q.xyz.iter().any(|c| !c.is_finite()))
        .map(|q| format!("track {} (t_q {})", q.track_id, q.t_q))
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "queries outside frames 0..{}: {}",
            n_frames.saturating_sub(1),
            bad.join(", ")
        )))
    }
}

/// Model config stored next to a checkpoint.
pub fn config_path(checkpoint: &Path) -> std::path::PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Write parameters and their config sidecar.
pub fn save_model(path: &Path, tracker: &Tracker, store: &ParamStore) -> Result<()> {
    crate::tensor::write_checkpoint(path, store)?;
    io::write_json(&config_path(path), &tracker.config)?;
    Ok(())
}

/// Rebuild a model from a checkpoint and its config sidecar.
pub fn load_model(path: &Path) -> Result<(Tracker, ParamStore)> {
    let config: TrackerConfig = io::read_json(&config_path(path))?;
    let mut store = ParamStore::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let tracker = Tracker::new(&config, &mut store, &mut rng)?;
    let loaded = crate::tensor::read_checkpoint(path)?;
    store.load_from(&loaded)?;
    Ok((tracker, store))
}
