//! C ABI over the `stlattice` library.
//!
//! Handles are opaque and owned by the caller once returned; free them with
//! the matching `*_free`. Every fallible call returns an `StlStatus` and
//! leaves a message for `stl_last_error` on failure.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use stlattice::cli::{cmd_run, RunReport};
use stlattice::config::RunConfig;
use stlattice::eval::average_precision;
use stlattice::geom::{iou, BBox, Detection};
use stlattice::synth::{GroundTruthFrame, GtBox};
use stlattice::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Config = 3,
    Io = 4,
    Parse = 5,
    Runtime = 6,
    Panic = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> StlStatus {
    match e {
        Error::InvalidInput(_) => StlStatus::InvalidInput,
        Error::Config(_) => StlStatus::Config,
        Error::Io { .. } => StlStatus::Io,
        Error::Parse { .. } => StlStatus::Parse,
        Error::Diverged { .. } => StlStatus::Runtime,
    }
}

/// Runs `f`, turning errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), (StlStatus, String)>) -> StlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => StlStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            StlStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (StlStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (StlStatus, String) {
    (StlStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (StlStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (StlStatus::InvalidInput, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], (StlStatus, String)> {
    match (p.is_null(), n) {
        (_, 0) => Ok(&[]),
        (true, _) => Err(null(what)),
        (false, n) => Ok(std::slice::from_raw_parts(p, n)),
    }
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn stl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn stl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Opaque run configuration.
pub struct StlConfig {
    inner: RunConfig,
}

/// Configuration with every default.
#[no_mangle]
pub extern "C" fn stl_config_default() -> *mut StlConfig {
    Box::into_raw(Box::new(StlConfig {
        inner: RunConfig::default(),
    }))
}

/// Parses TOML text. Relative paths in it are left as given.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stl_config_from_toml(text: *const c_char, out: *mut *mut StlConfig) -> StlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = RunConfig::from_toml(str_arg(text, "text")?).map_err(lib_err)?;
        cfg.validate().map_err(lib_err)?;
        *out = Box::into_raw(Box::new(StlConfig { inner: cfg }));
        Ok(())
    })
}

/// Loads a config file; relative paths resolve against its directory.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stl_config_load(path: *const c_char, out: *mut *mut StlConfig) -> StlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = RunConfig::load(str_arg(path, "path")?).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(StlConfig { inner: cfg }));
        Ok(())
    })
}

/// Restricts every recipe to one seed.
///
/// # Safety
/// `cfg` must come from this library and not be freed.
#[no_mangle]
pub unsafe extern "C" fn stl_config_set_seed(cfg: *mut StlConfig, seed: u64) -> StlStatus {
    guard(|| {
        let c = &mut cfg.as_mut().ok_or_else(|| null("cfg"))?.inner;
        c.seeds = vec![seed];
        c.sweep.seeds = vec![seed];
        c.experiments.seeds = vec![seed];
        Ok(())
    })
}

/// Sets the output directory.
///
/// # Safety
/// `cfg` must come from this library; `dir` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn stl_config_set_out(cfg: *mut StlConfig, dir: *const c_char) -> StlStatus {
    guard(|| {
        let c = cfg.as_mut().ok_or_else(|| null("cfg"))?;
        c.inner.out = PathBuf::from(str_arg(dir, "dir")?);
        Ok(())
    })
}

/// # Safety
/// `cfg` must come from this library (or be null) and is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn stl_config_free(cfg: *mut StlConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Opaque results of `stl_run`, one report per seed.
pub struct StlRun {
    reports: Vec<RunReport>,
}

/// Headline numbers of one seed's run.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StlRunSummary {
    pub seed: u64,
    pub map: f64,
    pub recall: f64,
    pub total_cost_ms: f64,
    pub effective_fps: f64,
    pub n_keyframes: usize,
}

/// Runs the pipeline for every configured seed, writing the usual files to
/// the output directory.
///
/// # Safety
/// `cfg` must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stl_run(cfg: *const StlConfig, per_node_eval: bool, out: *mut *mut StlRun) -> StlStatus {
    guard(|| {
        let c = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let reports = cmd_run(&c.inner, per_node_eval).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(StlRun { reports }));
        Ok(())
    })
}

/// Number of seeds in a run.
///
/// # Safety
/// `run` must come from `stl_run` or be null.
#[no_mangle]
pub unsafe extern "C" fn stl_run_count(run: *const StlRun) -> usize {
    run.as_ref().map_or(0, |r| r.reports.len())
}

/// # Safety
/// `run` must come from `stl_run` and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stl_run_summary(run: *const StlRun, index: usize, out: *mut StlRunSummary) -> StlStatus {
    guard(|| {
        let r = run.as_ref().ok_or_else(|| null("run"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let rep = r
            .reports
            .get(index)
            .ok_or_else(|| (StlStatus::InvalidInput, format!("index {index} out of range")))?;
        *out = StlRunSummary {
            seed: rep.seed,
            map: rep.eval.map,
            recall: rep.eval.recall,
            total_cost_ms: rep.eval.total_cost_ms,
            effective_fps: rep.eval.effective_fps,
            n_keyframes: rep.keyframes.len(),
        };
        Ok(())
    })
}

/// Full report of one seed as JSON. Free the string with `stl_string_free`.
///
/// # Safety
/// `run` must come from `stl_run` and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stl_run_json(run: *const StlRun, index: usize, out: *mut *mut c_char) -> StlStatus {
    guard(|| {
        let r = run.as_ref().ok_or_else(|| null("run"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let rep = r
            .reports
            .get(index)
            .ok_or_else(|| (StlStatus::InvalidInput, format!("index {index} out of range")))?;
        let text = serde_json::to_string_pretty(rep).map_err(|e| (StlStatus::Runtime, e.to_string()))?;
        *out = CString::new(text).expect("JSON has no NUL").into_raw();
        Ok(())
    })
}

/// # Safety
/// `run` must come from `stl_run` (or be null) and is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn stl_run_free(run: *mut StlRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// # Safety
/// `s` must come from this library (or be null) and is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn stl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Center-format box.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StlBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl From<StlBox> for BBox {
    fn from(b: StlBox) -> Self {
        BBox::new(b.cx, b.cy, b.w, b.h)
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StlDetection {
    pub frame: u32,
    pub class_id: u32,
    pub score: f64,
    pub bbox: StlBox,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StlGtBox {
    pub frame: u32,
    pub class_id: u32,
    pub object_id: u32,
    pub bbox: StlBox,
}

/// Intersection over union of two boxes.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn stl_iou(a: *const StlBox, b: *const StlBox, out: *mut f64) -> StlStatus {
    guard(|| {
        let (a, b) = (a.as_ref().ok_or_else(|| null("a"))?, b.as_ref().ok_or_else(|| null("b"))?);
        *out.as_mut().ok_or_else(|| null("out"))? = iou(&(*a).into(), &(*b).into());
        Ok(())
    })
}

/// All-points interpolated AP of `class_id` over `n_frames` frames. Sets
/// `defined` to false (and `ap` to 0) when the class has no ground truth.
///
/// # Safety
/// `dets` and `gt` must point to `n_dets` and `n_gt` elements (or may be null
/// when the count is 0); `ap` and `defined` must be valid.
#[no_mangle]
pub unsafe extern "C" fn stl_average_precision(
    dets: *const StlDetection,
    n_dets: usize,
    gt: *const StlGtBox,
    n_gt: usize,
    n_frames: u32,
    class_id: u32,
    iou_thresh: f64,
    ap: *mut f64,
    defined: *mut bool,
) -> StlStatus {
    guard(|| {
        let dets = slice_arg(dets, n_dets, "dets")?;
        let gt = slice_arg(gt, n_gt, "gt")?;
        let ap = ap.as_mut().ok_or_else(|| null("ap"))?;
        let defined = defined.as_mut().ok_or_else(|| null("defined"))?;
        let mut per_frame: Vec<Vec<Detection>> = vec![Vec::new(); n_frames as usize];
        let mut frames: Vec<GroundTruthFrame> = (0..n_frames)
            .map(|frame| GroundTruthFrame {
                frame,
                boxes: Vec::new(),
            })
            .collect();
        let range = |f: u32| {
            if f < n_frames {
                Ok(f as usize)
            } else {
                Err((StlStatus::InvalidInput, format!("frame {f} outside 0..{n_frames}")))
            }
        };
        for d in dets {
            per_frame[range(d.frame)?].push(Detection::new(d.bbox.into(), d.class_id, d.score));
        }
        for g in gt {
            frames[range(g.frame)?].boxes.push(GtBox {
                bbox: g.bbox.into(),
                class_id: g.class_id,
                object_id: g.object_id,
            });
        }
        let r = average_precision(&per_frame, &frames, class_id, iou_thresh).map_err(lib_err)?;
        *ap = r.unwrap_or(0.0);
        *defined = r.is_some();
        Ok(())
    })
}
