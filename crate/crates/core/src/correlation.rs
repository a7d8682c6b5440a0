//! Multi-scale kNN feature correlation with offset encoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{CloudGeometry, FusedPointCloud};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Which geometric terms accompany each similarity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetMode {
    /// Similarity only.
    NoOffset,
    /// Similarity and `x_k - p`.
    #[default]
    OffsetOnly,
    /// Similarity, `x_k - p` and `x_k`.
    OffsetAndLocation,
}

impl OffsetMode {
    /// Values stored per neighbor.
    pub fn entry_width(self) -> usize {
        match self {
            OffsetMode::NoOffset => 1,
            OffsetMode::OffsetOnly => 4,
            OffsetMode::OffsetAndLocation => 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorrelationConfig {
    pub k: usize,
    pub mode: OffsetMode,
    /// Multiplier applied to offsets and locations before they enter a token.
    pub offset_scale: f64,
}

impl Default for CorrelationConfig {
    fn default() -> Self {
        Self {
            k: 16,
            mode: OffsetMode::OffsetOnly,
            offset_scale: 1.0,
        }
    }
}

impl CorrelationConfig {
    /// Length of the flattened correlation for `scales` pyramid levels.
    pub fn width(&self, scales: usize) -> usize {
        scales * self.k * self.mode.entry_width()
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("correlation K must be >= 1"));
        }
        if !(self.offset_scale.is_finite() && self.offset_scale > 0.0) {
            return Err(Error::invalid("offset_scale must be positive"));
        }
        Ok(())
    }
}

/// One neighbor's contribution. Padding entries are all zero with `valid = false`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CorrEntry {
    pub index: usize,
    pub similarity: f64,
    pub offset: [f64; 3],
    pub location: [f64; 3],
    pub valid: bool,
}

/// Per-scale neighbor lists, each exactly `K` long.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorrelationSet {
    pub scales: Vec<Vec<CorrEntry>>,
}

/// kNN similarities and offsets of a track feature around `p` at every scale.
pub fn correlate<T: Real>(f: &[T], p: [f64; 3], clouds: &[FusedPointCloud<T>], k: usize) -> Result<CorrelationSet> {
    if k == 0 {
        return Err(Error::invalid("correlation K must be >= 1"));
    }
    let mut scales = Vec::with_capacity(clouds.len());
    for cloud in clouds {
        if cloud.features.last_dim() != f.len() {
            return Err(Error::invalid(format!(
                "track feature has {} channels, cloud has {}",
                f.len(),
                cloud.features.last_dim()
            )));
        }
        let nn = cloud.knn_query(&p, k)?;
        let mut entries: Vec<CorrEntry> = nn
            .iter()
            .map(|n| {
                let x = cloud.geometry.positions[n.index];
                let similarity = f
                    .iter()
                    .zip(cloud.feature(n.index))
                    .map(|(&a, &b)| a.as_f64() * b.as_f64())
                    .sum();
                CorrEntry {
                    index: n.index,
                    similarity,
                    offset: [x[0] - p[0], x[1] - p[1], x[2] - p[2]],
                    location: x,
                    valid: true,
                }
            })
            .collect();
        entries.resize(k, CorrEntry::default());
        scales.push(entries);
    }
    Ok(CorrelationSet { scales })
}

/// Flatten per scale in neighbor order, then concatenate scales.
pub fn embed_correlation(cset: &CorrelationSet, mode: OffsetMode) -> Vec<f64> {
    let mut out = Vec::new();
    for e in cset.scales.iter().flatten() {
        out.push(e.similarity);
        if mode != OffsetMode::NoOffset {
            out.extend_from_slice(&e.offset);
        }
        if mode == OffsetMode::OffsetAndLocation {
            out.extend_from_slice(&e.location);
        }
    }
    out
}

/// Precomputed neighbor lists for a batch of tokens at one scale.
#[derive(Clone, Debug)]
pub struct NeighborBatch {
    /// `[tokens * K]` rows into the flattened level tensor; padding uses row 0.
    pub rows: Vec<usize>,
    /// 1 for real neighbors, 0 for padding.
    pub mask: Vec<f64>,
    /// `[tokens * K * 3]` neighbor positions, zero for padding.
    pub points: Vec<f64>,
}

/// Look up neighbors of `positions[i]` in `clouds[i]` at one scale.
pub fn neighbor_batch(clouds: &[&CloudGeometry], positions: &[[f64; 3]], cfg: &CorrelationConfig) -> Result<NeighborBatch> {
    let k = cfg.k;
    let n = positions.len();
    let mut rows = vec![0usize; n * k];
    let mut mask = vec![0.0; n * k];
    let mut points = vec![0.0; n * k * 3];
    for (i, (cloud, p)) in clouds.iter().zip(positions).enumerate() {
        for (j, nb) in cloud.knn(p, k)?.iter().enumerate() {
            let slot = i * k + j;
            rows[slot] = cloud.feature_rows[nb.index];
            mask[slot] = 1.0;
            points[slot * 3..slot * 3 + 3].copy_from_slice(&cloud.positions[nb.index]);
        }
    }
    Ok(NeighborBatch { rows, mask, points })
}

/// Differentiable correlation features `[tokens, K * width]` for one scale.
///
/// `level` is the flattened feature tensor `[rows, d]`, `f` the track features
/// `[tokens, d]` and `p` the track positions `[tokens, 3]`. Gradients reach all
/// three; the neighbor selection itself is piecewise constant.
pub fn correlate_on_tape<T: Real>(
    tape: &mut Tape<T>,
    level: Var,
    f: Var,
    p: Var,
    batch: &NeighborBatch,
    cfg: &CorrelationConfig,
) -> Result<Var> {
    let k = cfg.k;
    let fs = tape.shape(f).to_vec();
    if fs.len() != 2 {
        return Err(Error::invalid(format!("track features must be [tokens, d], got {fs:?}")));
    }
    let (n, d) = (fs[0], fs[1]);
    if batch.rows.len() != n * k || tape.shape(p) != [n, 3] {
        return Err(Error::invalid("neighbor batch does not match the token count"));
    }
    let g = tape.gather_rows(level, &batch.rows)?;
    let g = tape.reshape(g, &[n, k, d])?;
    let q = tape.reshape(f, &[n, 1, d])?;
    let sim = tape.bmm(q, g, true)?;
    let mask = tape.constant(Tensor::from_f64(&[n, 1, k], &batch.mask)?);
    let sim = tape.mul(sim, mask)?;
    let sim = tape.reshape(sim, &[n, k, 1])?;
    let mut parts = vec![sim];
    if cfg.mode != OffsetMode::NoOffset {
        let x = tape.constant(Tensor::from_f64(&[n, k, 3], &batch.points)?);
        let rep: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect();
        let pr = tape.gather_rows(p, &rep)?;
        let pr = tape.reshape(pr, &[n, k, 3])?;
        let off = tape.sub(x, pr)?;
        let m3: Vec<f64> = batch.mask.iter().flat_map(|&m| [m; 3]).collect();
        let m3 = tape.constant(Tensor::from_f64(&[n, k, 3], &m3)?);
        let off = tape.mul(off, m3)?;
        parts.push(tape.scale(off, cfg.offset_scale)?);
    }
    if cfg.mode == OffsetMode::OffsetAndLocation {
        let loc: Vec<f64> = batch.points.iter().map(|v| v * cfg.offset_scale).collect();
        parts.push(tape.constant(Tensor::from_f64(&[n, k, 3], &loc)?));
    }
    let w = cfg.mode.entry_width();
    let out = if parts.len() == 1 { sim } else { tape.concat(&parts)? };
    Ok(tape.reshape(out, &[n, k * w])?)
}
