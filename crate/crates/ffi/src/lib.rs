//! C ABI over the tracker: load a checkpoint and a scene, track queries, read rows.
//!
//! Every function returns an [`MvtStatus`]. On failure the message is kept per
//! thread and can be read with [`mvt_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use mvtrack::error::Error;
use mvtrack::io::{self, PredRow, QueryRow};
use mvtrack::scenesim::{self, SimConfig};
use mvtrack::tensor::ParamStore;
use mvtrack::tracker::{self, Tracker, Video};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MvtStatus {
    Ok = 0,
    InvalidArgument = 1,
    Io = 2,
    Divergence = 3,
    NullPointer = 4,
    Panic = 5,
}

/// A query point: track `track_id` starts at frame `t_q` at `xyz`.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MvtQuery {
    pub track_id: u64,
    pub t_q: u64,
    pub xyz: [f64; 3],
}

/// One predicted (track, frame) row.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MvtPrediction {
    pub track_id: u64,
    pub t: u64,
    pub xyz: [f64; 3],
    pub visible: u8,
    pub confidence: f64,
}

/// Loaded model weights and configuration.
pub struct MvtTracker {
    tracker: Tracker,
    store: ParamStore,
}

/// A multi-view RGB-D video in memory.
pub struct MvtScene {
    video: Video,
    queries: Vec<QueryRow>,
}

/// Prediction rows of one tracking call.
pub struct MvtTracks {
    rows: Vec<PredRow>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> MvtStatus {
    match e.exit_code() {
        2 => MvtStatus::Io,
        3 => MvtStatus::Divergence,
        _ => MvtStatus::InvalidArgument,
    }
}

enum Fail {
    Null(&'static str),
    Invalid(String),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

impl From<io::IoError> for Fail {
    fn from(e: io::IoError) -> Self {
        Fail::Core(e.into())
    }
}

impl From<scenesim::SimError> for Fail {
    fn from(e: scenesim::SimError) -> Self {
        Fail::Core(e.into())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MvtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            MvtStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("{what} is null"));
            MvtStatus::NullPointer
        }
        Ok(Err(Fail::Invalid(m))) => {
            set_error(m);
            MvtStatus::InvalidArgument
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            MvtStatus::Panic
        }
    }
}

/// # Safety
/// `p` is null or a valid NUL-terminated string.
unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| Fail::Invalid(format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

/// # Safety
/// `p` is null or a valid, aligned pointer.
unsafe fn obj<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn mvt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn mvt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Write a synthetic dataset with default settings apart from the arguments.
///
/// # Safety
/// `out_dir` must be a valid NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn mvt_simulate(out_dir: *const c_char, n_scenes: u32, n_views: u32, n_frames: u32, seed: u64) -> MvtStatus {
    guard(|| {
        let dir = path_arg(out_dir, "out_dir")?;
        let cfg = SimConfig {
            n_scenes: n_scenes as usize,
            n_views: n_views as usize,
            n_frames: n_frames as usize,
            seed,
            ..SimConfig::default()
        };
        scenesim::generate_dataset(&cfg, &dir)?;
        Ok(())
    })
}

/// Load a checkpoint written by `train`.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mvt_tracker_load(path: *const c_char, out: *mut *mut MvtTracker) -> MvtStatus {
    guard(|| {
        let p = path_arg(path, "path")?;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let (tracker, store) = tracker::load_model(&p)?;
        *out = Box::into_raw(Box::new(MvtTracker { tracker, store }));
        Ok(())
    })
}

/// Override window length and refinement iterations; 0 keeps the current value.
///
/// # Safety
/// `t` is null or a handle from [`mvt_tracker_load`].
#[no_mangle]
pub unsafe extern "C" fn mvt_tracker_configure(t: *mut MvtTracker, window: u32, iterations: u32) -> MvtStatus {
    guard(|| {
        let t = t.as_mut().ok_or(Fail::Null("tracker"))?;
        let mut cfg = t.tracker.config.clone();
        if window > 0 {
            cfg.window = window as usize;
        }
        if iterations > 0 {
            cfg.iterations = iterations as usize;
        }
        cfg.validate()?;
        t.tracker.config = cfg;
        Ok(())
    })
}

/// # Safety
/// `t` is null or a handle from [`mvt_tracker_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mvt_tracker_free(t: *mut MvtTracker) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Load a scene directory; its `queries.csv` is read when present.
///
/// # Safety
/// `dir` must be a valid path string; `depth_source` may be null for "depth".
#[no_mangle]
pub unsafe extern "C" fn mvt_scene_load(dir: *const c_char, depth_source: *const c_char, out: *mut *mut MvtScene) -> MvtStatus {
    guard(|| {
        let d = path_arg(dir, "dir")?;
        let src = if depth_source.is_null() {
            "depth".to_string()
        } else {
            path_arg(depth_source, "depth_source")?.to_string_lossy().into_owned()
        };
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let data = io::load_scene(&d, &src)?;
        let qpath = d.join("queries.csv");
        let queries = if qpath.exists() { io::read_queries(&qpath)? } else { Vec::new() };
        *out = Box::into_raw(Box::new(MvtScene {
            video: Video::from_scene(&data),
            queries,
        }));
        Ok(())
    })
}

/// # Safety
/// `s` is null or a handle from [`mvt_scene_load`].
#[no_mangle]
pub unsafe extern "C" fn mvt_scene_num_frames(s: *const MvtScene) -> u64 {
    s.as_ref().map_or(0, |s| s.video.n_frames() as u64)
}

/// # Safety
/// `s` is null or a handle from [`mvt_scene_load`].
#[no_mangle]
pub unsafe extern "C" fn mvt_scene_num_views(s: *const MvtScene) -> u64 {
    s.as_ref().map_or(0, |s| s.video.n_views() as u64)
}

/// Queries read from the scene's `queries.csv`.
///
/// # Safety
/// `s` is null or a handle from [`mvt_scene_load`].
#[no_mangle]
pub unsafe extern "C" fn mvt_scene_num_queries(s: *const MvtScene) -> u64 {
    s.as_ref().map_or(0, |s| s.queries.len() as u64)
}

/// # Safety
/// `s` is a scene handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mvt_scene_get_query(s: *const MvtScene, i: u64, out: *mut MvtQuery) -> MvtStatus {
    guard(|| {
        let s = obj(s, "scene")?;
        let out = out.as_mut().ok_or(Fail::Null("out"))?;
        let q = s
            .queries
            .get(i as usize)
            .ok_or_else(|| Fail::Invalid(format!("query {i} out of {}", s.queries.len())))?;
        *out = MvtQuery {
            track_id: q.track_id as u64,
            t_q: q.t_q as u64,
            xyz: q.xyz,
        };
        Ok(())
    })
}

/// # Safety
/// `s` is null or a handle from [`mvt_scene_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mvt_scene_free(s: *mut MvtScene) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Track `n` queries through the scene. A null `queries` with `n == 0` uses the
/// scene's own query file.
///
/// # Safety
/// Handles must be live; `queries` must point to `n` readable elements.
#[no_mangle]
pub unsafe extern "C" fn mvt_track(
    t: *const MvtTracker,
    s: *const MvtScene,
    queries: *const MvtQuery,
    n: u64,
    out: *mut *mut MvtTracks,
) -> MvtStatus {
    guard(|| {
        let t = obj(t, "tracker")?;
        let s = obj(s, "scene")?;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let qs: Vec<QueryRow> = if n == 0 && queries.is_null() {
            s.queries.clone()
        } else {
            if queries.is_null() {
                return Err(Fail::Null("queries"));
            }
            std::slice::from_raw_parts(queries, n as usize)
                .iter()
                .map(|q| QueryRow {
                    track_id: q.track_id as usize,
                    t_q: q.t_q as usize,
                    xyz: q.xyz,
                })
                .collect()
        };
        let fwd = t.tracker.track(&t.store, &s.video, &qs)?;
        let rows = fwd.rows(&qs, t.tracker.config.vis_threshold);
        *out = Box::into_raw(Box::new(MvtTracks { rows }));
        Ok(())
    })
}

/// # Safety
/// `r` is null or a handle from [`mvt_track`].
#[no_mangle]
pub unsafe extern "C" fn mvt_tracks_len(r: *const MvtTracks) -> u64 {
    r.as_ref().map_or(0, |r| r.rows.len() as u64)
}

/// # Safety
/// `r` is a handle from [`mvt_track`] and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mvt_tracks_get(r: *const MvtTracks, i: u64, out: *mut MvtPrediction) -> MvtStatus {
    guard(|| {
        let r = obj(r, "tracks")?;
        let out = out.as_mut().ok_or(Fail::Null("out"))?;
        let row = r
            .rows
            .get(i as usize)
            .ok_or_else(|| Fail::Invalid(format!("row {i} out of {}", r.rows.len())))?;
        *out = MvtPrediction {
            track_id: row.track_id as u64,
            t: row.t as u64,
            xyz: row.xyz,
            visible: row.visible as u8,
            confidence: row.confidence,
        };
        Ok(())
    })
}

/// Write rows in the predictions CSV format.
///
/// # Safety
/// `r` is a handle from [`mvt_track`]; `path` a valid path string.
#[no_mangle]
pub unsafe extern "C" fn mvt_tracks_write_csv(r: *const MvtTracks, path: *const c_char) -> MvtStatus {
    guard(|| {
        let r = obj(r, "tracks")?;
        let p = path_arg(path, "path")?;
        io::write_predictions(&p, &r.rows)?;
        Ok(())
    })
}

/// # Safety
/// `r` is null or a handle from [`mvt_track`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mvt_tracks_free(r: *mut MvtTracks) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}
