//! On-disk formats: PPM color frames, MVD1 depth maps, cameras.json,
//! track and query CSVs, and JSON manifests.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix4};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Camera, DepthMap};

pub const DEPTH_MAGIC: &[u8; 4] = b"MVD1";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail} (at byte {offset})")]
    Format { path: String, offset: u64, detail: String },
}

impl IoError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn format(path: &Path, offset: u64, detail: impl Into<String>) -> Self {
        IoError::Format {
            path: path.display().to_string(),
            offset,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = IoError> = std::result::Result<T, E>;

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| IoError::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| IoError::io(path, e))
}

pub fn frame_name(t: usize, ext: &str) -> String {
    format!("frame{t:04}.{ext}")
}

fn line_col_offset(text: &str, line: usize, col: usize) -> u64 {
    let start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (start + col.saturating_sub(1)) as u64
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| IoError::format(path, line_col_offset(&text, e.line(), e.column()), e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

/// 8-bit RGB image, row-major, interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn decode_ppm(buf: &[u8], path: &Path) -> Result<RgbImage> {
    let mut pos = 0;
    let mut token = |what: &str| -> Result<String> {
        loop {
            while pos < buf.len() && buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < buf.len() && buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(IoError::format(path, start as u64, format!("missing {what}")));
        }
        Ok(String::from_utf8_lossy(&buf[start..pos]).into_owned())
    };
    if token("magic")? != "P6" {
        return Err(IoError::format(path, 0, "expected P6 magic"));
    }
    let mut num = |what: &str| -> Result<usize> {
        let t = token(what)?;
        t.parse().map_err(|_| IoError::format(path, 0, format!("bad {what} `{t}`")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval != 255 {
        return Err(IoError::format(path, 0, format!("only maxval 255 is supported, got {maxval}")));
    }
    let start = pos + 1;
    let n = width * height * 3;
    if buf.len() < start + n {
        return Err(IoError::format(path, buf.len() as u64, format!("truncated pixel data, need {n} bytes")));
    }
    Ok(RgbImage {
        width,
        height,
        data: buf[start..start + n].to_vec(),
    })
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    write_bytes(path, &encode_ppm(img))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    decode_ppm(&read_bytes(path)?, path)
}

pub fn encode_depth(d: &DepthMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + d.data.len() * 4);
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&(d.height as u32).to_le_bytes());
    out.extend_from_slice(&(d.width as u32).to_le_bytes());
    for &x in &d.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_depth(buf: &[u8], path: &Path) -> Result<DepthMap> {
    if buf.len() < 12 {
        return Err(IoError::format(path, buf.len() as u64, "truncated header"));
    }
    if &buf[..4] != DEPTH_MAGIC {
        return Err(IoError::format(path, 0, "bad magic, expected MVD1"));
    }
    let height = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let need = 12 + width * height * 4;
    if buf.len() != need {
        return Err(IoError::format(
            path,
            buf.len().min(need) as u64,
            format!("expected {need} bytes for {height}x{width}, found {}", buf.len()),
        ));
    }
    let data = buf[12..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(DepthMap { width, height, data })
}

pub fn write_depth(path: &Path, d: &DepthMap) -> Result<()> {
    write_bytes(path, &encode_depth(d))
}

pub fn read_depth(path: &Path) -> Result<DepthMap> {
    decode_depth(&read_bytes(path)?, path)
}

/// Cameras of one view, either a single static pose or one per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewCameras {
    pub view_id: u32,
    pub frames: Vec<Camera>,
    pub per_frame: bool,
}

impl ViewCameras {
    pub fn fixed(cam: Camera) -> Self {
        Self {
            view_id: cam.view_id,
            frames: vec![cam],
            per_frame: false,
        }
    }

    pub fn at(&self, t: usize) -> &Camera {
        if self.per_frame {
            &self.frames[t.min(self.frames.len() - 1)]
        } else {
            &self.frames[0]
        }
    }

    pub fn map(&self, mut f: impl FnMut(&Camera) -> Camera) -> Self {
        Self {
            view_id: self.view_id,
            frames: self.frames.iter().map(&mut f).collect(),
            per_frame: self.per_frame,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CameraEntry {
    view_id: u32,
    #[serde(rename = "K")]
    k: Vec<f64>,
    #[serde(rename = "E", skip_serializing_if = "Option::is_none", default)]
    e: Option<Vec<f64>>,
    #[serde(rename = "E_per_frame", skip_serializing_if = "Option::is_none", default)]
    e_per_frame: Option<Vec<Vec<f64>>>,
}

fn row_major<const R: usize, const C: usize>(m: &nalgebra::SMatrix<f64, R, C>) -> Vec<f64> {
    (0..R).flat_map(|r| (0..C).map(move |c| m[(r, c)])).collect()
}

pub fn write_cameras(path: &Path, views: &[ViewCameras]) -> Result<()> {
    let entries: Vec<CameraEntry> = views
        .iter()
        .map(|vc| {
            let (e, e_per_frame) = if vc.per_frame {
                (None, Some(vc.frames.iter().map(|c| row_major(&c.e)).collect()))
            } else {
                (Some(row_major(&vc.frames[0].e)), None)
            };
            CameraEntry {
                view_id: vc.view_id,
                k: row_major(&vc.frames[0].k),
                e,
                e_per_frame,
            }
        })
        .collect();
    write_json(path, &entries)
}

/// Read cameras.json; image size comes from the scene manifest.
pub fn read_cameras(path: &Path, width: usize, height: usize) -> Result<Vec<ViewCameras>> {
    let entries: Vec<CameraEntry> = read_json(path)?;
    let bad = |detail: String| IoError::format(path, 0, detail);
    let mut views = Vec::with_capacity(entries.len());
    for entry in entries {
        if entry.k.len() != 9 {
            return Err(bad(format!("view {}: K needs 9 values", entry.view_id)));
        }
        let k = Matrix3::from_row_slice(&entry.k);
        let (poses, per_frame) = match (entry.e, entry.e_per_frame) {
            (Some(e), None) => (vec![e], false),
            (None, Some(es)) if !es.is_empty() => (es, true),
            _ => return Err(bad(format!("view {}: exactly one of E or E_per_frame is required", entry.view_id))),
        };
        let mut frames = Vec::with_capacity(poses.len());
        for e in poses {
            if e.len() != 16 {
                return Err(bad(format!("view {}: E needs 16 values", entry.view_id)));
            }
            let cam = Camera::new(entry.view_id, k, Matrix4::from_row_slice(&e), width, height)
                .map_err(|err| bad(format!("view {}: {err}", entry.view_id)))?;
            frames.push(cam);
        }
        views.push(ViewCameras {
            view_id: entry.view_id,
            frames,
            per_frame,
        });
    }
    Ok(views)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub scene_id: usize,
    pub units: String,
    pub n_views: usize,
    pub n_frames: usize,
    pub width: usize,
    pub height: usize,
    pub n_tracks: usize,
    pub seed: u64,
    /// Multiplier applied to metric distance thresholds for this scene.
    #[serde(default = "one")]
    pub threshold_scale: f64,
    #[serde(default)]
    pub depth_source: String,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct GtRow {
    pub track_id: usize,
    pub t: usize,
    pub xyz: [f64; 3],
    pub visible: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryRow {
    pub track_id: usize,
    pub t_q: usize,
    pub xyz: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredRow {
    pub track_id: usize,
    pub t: usize,
    pub xyz: [f64; 3],
    pub visible: bool,
    pub confidence: f64,
}

/// Format with six significant digits.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x:.5}");
    }
    let mag = x.abs().log10().floor() as i32;
    let decimals = (5 - mag).max(0) as usize;
    format!("{x:.decimals$}")
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_err(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> IoError {
    let offset = e.position().map(|p| p.byte()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => IoError::io(path, source),
        kind => IoError::format(path, offset, format!("{kind:?}")),
    }
}

fn write_rows(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| IoError::io(path, e))
}

/// Parse a CSV with the exact `header`, calling `f` on each record's fields.
fn read_rows<T>(path: &Path, header: &[&str], mut f: impl FnMut(&csv::StringRecord) -> Option<T>) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let got = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if got.iter().map(str::trim).ne(header.iter().copied()) {
        return Err(IoError::format(path, 0, format!("expected header `{}`", header.join(","))));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let offset = rec.position().map(|p| p.byte()).unwrap_or(0);
        if rec.len() != header.len() {
            return Err(IoError::format(path, offset, format!("expected {} fields, got {}", header.len(), rec.len())));
        }
        match f(&rec) {
            Some(v) => out.push(v),
            None => {
                return Err(IoError::format(path, offset, format!("malformed record `{}`", rec.iter().collect::<Vec<_>>().join(","))));
            }
        }
    }
    Ok(out)
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize) -> Option<T> {
    rec.get(i)?.trim().parse().ok()
}

fn flag(rec: &csv::StringRecord, i: usize) -> Option<bool> {
    match rec.get(i)?.trim() {
        "1" | "true" => Some(true),
        "0" | "false" => Some(false),
        _ => None,
    }
}

fn xyz(rec: &csv::StringRecord, at: usize) -> Option<[f64; 3]> {
    let v = [field(rec, at)?, field(rec, at + 1)?, field(rec, at + 2)?];
    v.iter().all(|x: &f64| x.is_finite()).then_some(v)
}

pub const GT_HEADER: [&str; 6] = ["track_id", "t", "x", "y", "z", "visible"];
pub const QUERY_HEADER: [&str; 5] = ["track_id", "t_q", "x", "y", "z"];
pub const PRED_HEADER: [&str; 7] = ["track_id", "t", "x", "y", "z", "visible", "confidence"];

pub fn write_gt_tracks(path: &Path, rows: &[GtRow]) -> Result<()> {
    write_rows(
        path,
        &GT_HEADER,
        rows.iter().map(|r| {
            vec![
                r.track_id.to_string(),
                r.t.to_string(),
                r.xyz[0].to_string(),
                r.xyz[1].to_string(),
                r.xyz[2].to_string(),
                (r.visible as u8).to_string(),
            ]
        }),
    )
}

pub fn read_gt_tracks(path: &Path) -> Result<Vec<GtRow>> {
    read_rows(path, &GT_HEADER, |r| {
        Some(GtRow {
            track_id: field(r, 0)?,
            t: field(r, 1)?,
            xyz: xyz(r, 2)?,
            visible: flag(r, 5)?,
        })
    })
}

pub fn write_queries(path: &Path, rows: &[QueryRow]) -> Result<()> {
    write_rows(
        path,
        &QUERY_HEADER,
        rows.iter().map(|r| {
            vec![
                r.track_id.to_string(),
                r.t_q.to_string(),
                r.xyz[0].to_string(),
                r.xyz[1].to_string(),
                r.xyz[2].to_string(),
            ]
        }),
    )
}

pub fn read_queries(path: &Path) -> Result<Vec<QueryRow>> {
    read_rows(path, &QUERY_HEADER, |r| {
        Some(QueryRow {
            track_id: field(r, 0)?,
            t_q: field(r, 1)?,
            xyz: xyz(r, 2)?,
        })
    })
}

pub fn write_predictions(path: &Path, rows: &[PredRow]) -> Result<()> {
    write_rows(
        path,
        &PRED_HEADER,
        rows.iter().map(|r| {
            vec![
                r.track_id.to_string(),
                r.t.to_string(),
                r.xyz[0].to_string(),
                r.xyz[1].to_string(),
                r.xyz[2].to_string(),
                (r.visible as u8).to_string(),
                sig6(r.confidence),
            ]
        }),
    )
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredRow>> {
    read_rows(path, &PRED_HEADER, |r| {
        Some(PredRow {
            track_id: field(r, 0)?,
            t: field(r, 1)?,
            xyz: xyz(r, 2)?,
            visible: flag(r, 5)?,
            confidence: field(r, 6)?,
        })
    })
}

/// Write a CSV with an arbitrary header; used for logs and flat reports.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    write_rows(path, header, rows.iter().cloned())
}

/// Read a CSV with an exact header into string fields.
pub fn read_table(path: &Path, header: &[&str]) -> Result<Vec<Vec<String>>> {
    read_rows(path, header, |r| Some(r.iter().map(str::to_string).collect()))
}

/// A scene loaded from disk, frames indexed `[view][frame]`.
#[derive(Clone, Debug)]
pub struct SceneData {
    pub dir: PathBuf,
    pub manifest: SceneManifest,
    pub cameras: Vec<ViewCameras>,
    pub rgb: Vec<Vec<RgbImage>>,
    pub depth: Vec<Vec<DepthMap>>,
}

impl SceneData {
    pub fn n_frames(&self) -> usize {
        self.manifest.n_frames
    }

    pub fn n_views(&self) -> usize {
        self.cameras.len()
    }
}

/// Load a scene directory. `depth_subdir` selects the depth source
/// (`depth` for simulated depth, or any directory of MVD1 files laid out the same way).
pub fn load_scene(dir: &Path, depth_subdir: &str) -> Result<SceneData> {
    let manifest: SceneManifest = read_json(&dir.join("manifest.json"))?;
    let cameras = read_cameras(&dir.join("cameras.json"), manifest.width, manifest.height)?;
    if cameras.len() != manifest.n_views {
        return Err(IoError::format(
            &dir.join("cameras.json"),
            0,
            format!("{} views listed, manifest says {}", cameras.len(), manifest.n_views),
        ));
    }
    let mut rgb = Vec::with_capacity(cameras.len());
    let mut depth = Vec::with_capacity(cameras.len());
    for v in 0..cameras.len() {
        let mut rv = Vec::with_capacity(manifest.n_frames);
        let mut dv = Vec::with_capacity(manifest.n_frames);
        for t in 0..manifest.n_frames {
            let rp = dir.join("rgb").join(format!("view{v}")).join(frame_name(t, "ppm"));
            let dp = dir.join(depth_subdir).join(format!("view{v}")).join(frame_name(t, "mvd"));
            let img = read_ppm(&rp)?;
            let d = read_depth(&dp)?;
            if (img.width, img.height) != (manifest.width, manifest.height) {
                return Err(IoError::format(&rp, 0, format!("size {}x{} differs from manifest", img.width, img.height)));
            }
            if (d.width, d.height) != (img.width, img.height) {
                return Err(IoError::format(&dp, 4, "depth size differs from the color frame"));
            }
            rv.push(img);
            dv.push(d);
        }
        rgb.push(rv);
        depth.push(dv);
    }
    Ok(SceneData {
        dir: dir.to_path_buf(),
        manifest,
        cameras,
        rgb,
        depth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{intrinsics, look_at, Vec3};
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn depth_roundtrip_bit_exact(h in 1usize..6, w in 1usize..6, seed in any::<u32>()) {
            let data: Vec<f32> = (0..h * w)
                .map(|i| f32::from_bits(seed.wrapping_mul(2246822519).wrapping_add((i as u32).wrapping_mul(3266489917))))
                .collect();
            let d = DepthMap { width: w, height: h, data };
            let back = decode_depth(&encode_depth(&d), Path::new("x.mvd")).unwrap();
            let a: Vec<u32> = d.data.iter().map(|x| x.to_bits()).collect();
            let b: Vec<u32> = back.data.iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!((back.width, back.height), (w, h));
        }
    }

    #[test]
    fn depth_header_and_errors() {
        let d = DepthMap {
            width: 3,
            height: 2,
            data: vec![1.0, f32::NAN, 2.0, 3.0, 4.0, 5.0],
        };
        let b = encode_depth(&d);
        assert_eq!(&b[..4], b"MVD1");
        assert_eq!(&b[4..8], &2u32.to_le_bytes());
        assert_eq!(&b[8..12], &3u32.to_le_bytes());
        let err = decode_depth(&b[..20], Path::new("d.mvd")).unwrap_err().to_string();
        assert!(err.contains("d.mvd") && err.contains("byte"), "{err}");
    }

    #[test]
    fn ppm_roundtrip() {
        let mut img = RgbImage::new(3, 2);
        img.data.iter_mut().enumerate().for_each(|(i, p)| *p = i as u8 * 7);
        let back = decode_ppm(&encode_ppm(&img), Path::new("a.ppm")).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn cameras_roundtrip_static_and_per_frame() {
        let dir = tempfile::tempdir().unwrap();
        let k = intrinsics(30.0, 31.0, 15.5, 15.5);
        let c0 = Camera::new(0, k, look_at(Vec3::new(2.0, 0.0, 1.0), Vec3::zeros(), Vec3::z()), 32, 32).unwrap();
        let c1 = Camera::new(1, k, look_at(Vec3::new(0.0, 2.0, 1.0), Vec3::zeros(), Vec3::z()), 32, 32).unwrap();
        let c1b = Camera::new(1, k, look_at(Vec3::new(0.1, 2.0, 1.0), Vec3::zeros(), Vec3::z()), 32, 32).unwrap();
        let views = vec![
            ViewCameras::fixed(c0),
            ViewCameras {
                view_id: 1,
                frames: vec![c1, c1b],
                per_frame: true,
            },
        ];
        let p = dir.path().join("cameras.json");
        write_cameras(&p, &views).unwrap();
        let back = read_cameras(&p, 32, 32).unwrap();
        assert_eq!(back, views);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"E\"") && text.contains("\"E_per_frame\""));
    }

    #[test]
    fn csv_roundtrip_and_malformed_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gt_tracks.csv");
        let rows = vec![
            GtRow {
                track_id: 0,
                t: 0,
                xyz: [0.1, -0.2, 0.30000000000000004],
                visible: true,
            },
            GtRow {
                track_id: 0,
                t: 1,
                xyz: [1.0, 2.0, 3.0],
                visible: false,
            },
        ];
        write_gt_tracks(&p, &rows).unwrap();
        assert_eq!(read_gt_tracks(&p).unwrap(), rows);
        std::fs::write(&p, "track_id,t,x,y,z,visible\n0,0,1,2,3,1\n0,1,oops,2,3,1\n").unwrap();
        let err = read_gt_tracks(&p).unwrap_err().to_string();
        assert!(err.contains("gt_tracks.csv") && err.contains("at byte 37"), "{err}");
    }

    #[test]
    fn missing_file_reports_path() {
        let err = read_cameras(Path::new("/nonexistent/cameras.json"), 4, 4).unwrap_err();
        assert!(matches!(err, IoError::Io { .. }));
        assert!(err.to_string().contains("/nonexistent/cameras.json"));
    }

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(0.5), "0.500000");
        assert_eq!(sig6(1.0), "1.00000");
        assert_eq!(sig6(0.00123456789), "0.00123457");
    }
}
