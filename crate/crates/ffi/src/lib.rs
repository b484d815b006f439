//! C interface to trajectory and LCA matrix files and to the run pipeline.
//!
//! Every function returns an [`LcaStatus`]; on failure a message is kept per
//! thread and can be read with [`lca_last_error_message`].  Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use lca::analysis::layer_totals;
use lca::engine::{load_matrix, LcaMatrix, LcamSidecar};
use lca::harness::{self, load_dataset, RunConfig, RunPaths};
use lca::trajectory::{SnapshotSource, Trajectory};
use lca::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LcaStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Numeric = 4,
    Data = 5,
    Format = 6,
    Integrity = 7,
    Range = 8,
    Contract = 9,
    Gate = 10,
    Io = 11,
    BufferTooSmall = 12,
    Panic = 13,
}

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_error(msg: &str) {
    LAST_ERROR.with(|e| {
        let mut v = e.borrow_mut();
        v.clear();
        v.extend(msg.bytes().filter(|b| *b != 0));
    });
}

fn status_of(e: &Error) -> LcaStatus {
    match e {
        Error::Config(_) => LcaStatus::Config,
        Error::Numeric { .. } => LcaStatus::Numeric,
        Error::Data(_) => LcaStatus::Data,
        Error::Format(_) => LcaStatus::Format,
        Error::Integrity(_) => LcaStatus::Integrity,
        Error::Range { .. } => LcaStatus::Range,
        Error::Contract(_) => LcaStatus::Contract,
        Error::LcaGate { .. } => LcaStatus::Gate,
        Error::Io(_) => LcaStatus::Io,
    }
}

enum Fail {
    Status(LcaStatus, String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> LcaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LcaStatus::Ok,
        Ok(Err(Fail::Lib(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Status(s, msg))) => {
            set_error(&msg);
            s
        }
        Err(_) => {
            set_error("internal panic");
            LcaStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail::Status(LcaStatus::NullArgument, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Fail::Status(LcaStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn out_slice<'a>(buf: *mut f64, len: usize, need: usize) -> Result<&'a mut [f64], Fail> {
    if buf.is_null() {
        return Err(null("output buffer"));
    }
    if len < need {
        return Err(Fail::Status(
            LcaStatus::BufferTooSmall,
            format!("buffer holds {len} values, {need} needed"),
        ));
    }
    Ok(std::slice::from_raw_parts_mut(buf, need))
}

unsafe fn write_out<T>(out: *mut T, v: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = v;
    Ok(())
}

/// Length in bytes of the calling thread's last error message (no NUL).
#[no_mangle]
pub extern "C" fn lca_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().len())
}

/// Copy the last error message into `buf` as a NUL-terminated string,
/// truncated to `len - 1` bytes.  Returns the number of bytes copied.
///
/// # Safety
/// `buf` must be valid for `len` bytes or null.
#[no_mangle]
pub unsafe extern "C" fn lca_last_error_message(buf: *mut c_char, len: usize) -> usize {
    if buf.is_null() || len == 0 {
        return 0;
    }
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let n = e.len().min(len - 1);
        ptr::copy_nonoverlapping(e.as_ptr(), buf as *mut u8, n);
        *buf.add(n) = 0;
        n
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lca_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Opaque trajectory handle.
pub struct LcaTrajectory {
    inner: Trajectory,
}

/// Open and verify a trajectory file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lca_trajectory_open(path: *const c_char, out: *mut *mut LcaTrajectory) -> LcaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("output pointer"));
        }
        *out = ptr::null_mut();
        let p = path_arg(path, "path")?;
        let inner = Trajectory::open(p)?;
        *out = Box::into_raw(Box::new(LcaTrajectory { inner }));
        Ok(())
    })
}

/// # Safety
/// `h` must come from [`lca_trajectory_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lca_trajectory_free(h: *mut LcaTrajectory) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Number of steps T (snapshots are 0..=T) and parameters K.
///
/// # Safety
/// `h` must be a live handle; `steps` and `params` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lca_trajectory_shape(
    h: *const LcaTrajectory,
    steps: *mut usize,
    params: *mut usize,
) -> LcaStatus {
    guard(|| {
        let t = h.as_ref().ok_or_else(|| null("handle"))?;
        write_out(steps, t.inner.num_iterations())?;
        write_out(params, t.inner.num_params())
    })
}

/// Copy snapshot θ_t into `buf` (`len` ≥ K).
///
/// # Safety
/// `h` must be a live handle; `buf` must be valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn lca_trajectory_snapshot(
    h: *const LcaTrajectory,
    t: usize,
    buf: *mut f64,
    len: usize,
) -> LcaStatus {
    guard(|| {
        let tr = h.as_ref().ok_or_else(|| null("handle"))?;
        let out = out_slice(buf, len, tr.inner.num_params())?;
        tr.inner.snapshot_into(t, out)?;
        Ok(())
    })
}

/// Opaque handle to a loaded LCA matrix and its sidecar.
pub struct LcaAllocation {
    matrix: LcaMatrix,
    side: LcamSidecar,
}

/// Load an LCA matrix file together with its `.layout.json` sidecar.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lca_allocation_open(path: *const c_char, out: *mut *mut LcaAllocation) -> LcaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("output pointer"));
        }
        *out = ptr::null_mut();
        let p = path_arg(path, "path")?;
        let (matrix, side) = load_matrix(p)?;
        *out = Box::into_raw(Box::new(LcaAllocation { matrix, side }));
        Ok(())
    })
}

/// # Safety
/// `h` must come from [`lca_allocation_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lca_allocation_free(h: *mut LcaAllocation) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Steps T, parameters K and dense layers L.
///
/// # Safety
/// `h` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn lca_allocation_shape(
    h: *const LcaAllocation,
    steps: *mut usize,
    params: *mut usize,
    layers: *mut usize,
) -> LcaStatus {
    guard(|| {
        let a = h.as_ref().ok_or_else(|| null("handle"))?;
        write_out(steps, a.matrix.steps())?;
        write_out(params, a.matrix.params())?;
        write_out(layers, a.side.layout.num_layers())
    })
}

/// Copy row A[t, ·] into `buf` (`len` ≥ K).
///
/// # Safety
/// `h` must be a live handle; `buf` must be valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn lca_allocation_row(
    h: *const LcaAllocation,
    t: usize,
    buf: *mut f64,
    len: usize,
) -> LcaStatus {
    guard(|| {
        let a = h.as_ref().ok_or_else(|| null("handle"))?;
        if t >= a.matrix.steps() {
            return Err(Error::Range {
                index: t,
                len: a.matrix.steps(),
            }
            .into());
        }
        out_slice(buf, len, a.matrix.params())?.copy_from_slice(a.matrix.row(t));
        Ok(())
    })
}

/// Copy the per-iteration residuals ε_t into `buf` (`len` ≥ T).
///
/// # Safety
/// `h` must be a live handle; `buf` must be valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn lca_allocation_residuals(h: *const LcaAllocation, buf: *mut f64, len: usize) -> LcaStatus {
    guard(|| {
        let a = h.as_ref().ok_or_else(|| null("handle"))?;
        out_slice(buf, len, a.matrix.steps())?.copy_from_slice(a.matrix.iter_error());
        Ok(())
    })
}

/// Copy the total LCA of each dense layer into `buf` (`len` ≥ L).
///
/// # Safety
/// `h` must be a live handle; `buf` must be valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn lca_allocation_layer_totals(
    h: *const LcaAllocation,
    buf: *mut f64,
    len: usize,
) -> LcaStatus {
    guard(|| {
        let a = h.as_ref().ok_or_else(|| null("handle"))?;
        let totals = layer_totals(&a.matrix, &a.side.layout);
        out_slice(buf, len, totals.totals.len())?.copy_from_slice(&totals.totals);
        Ok(())
    })
}

/// Loss change L(θ_T) − L(θ_0) and cumulative error in percent.
///
/// # Safety
/// `h` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn lca_allocation_error(
    h: *const LcaAllocation,
    loss_change: *mut f64,
    cumulative_error_pct: *mut f64,
) -> LcaStatus {
    guard(|| {
        let a = h.as_ref().ok_or_else(|| null("handle"))?;
        write_out(loss_change, a.matrix.summary.loss_change())?;
        write_out(cumulative_error_pct, a.matrix.cumulative_error_pct())
    })
}

/// Train and integrate the run described by a TOML configuration file,
/// writing artifacts under its output directory.  Returns
/// [`LcaStatus::Gate`] when the cumulative error gate fails (artifacts are
/// still written).
///
/// # Safety
/// `config_path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lca_run_pipeline(config_path: *const c_char) -> LcaStatus {
    guard(|| {
        let p = path_arg(config_path, "config_path")?;
        let cfg = RunConfig::load(p)?;
        let data = load_dataset(&cfg.dataset)?;
        let paths = RunPaths::for_config(&cfg);
        harness::train(&cfg, &data, &paths)?;
        harness::lca(&cfg, &data, &paths.trajectory, &paths, &mut [])?;
        Ok(())
    })
}
