//! C interface to the netsmpc simulator.
//!
//! Every entry point returns a [`NetsmpcStatus`]; on failure a message is
//! kept per thread and can be read with [`netsmpc_last_error`]. Handles are
//! opaque and must be released with the matching `_free` function.

use netsmpc::config::ExperimentConfig;
use netsmpc::error::Error;
use netsmpc::sim::{
    run_ensemble, write_ensemble_csv, write_trace_csv, EnsembleReport, Experiment, MomentSource,
    SimTrace,
};
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

/// Result of a call. Nonzero values match the command line exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetsmpcStatus {
    Ok = 0,
    Config = 2,
    Assumption = 3,
    Solver = 4,
    Io = 5,
    Internal = 6,
    NullArgument = 7,
    Panic = 8,
}

/// Configured experiment with its moments loaded.
pub struct NetsmpcExperiment {
    inner: Experiment,
}

/// Results of one ensemble run.
pub struct NetsmpcEnsemble {
    report: EnsembleReport,
    traces: Vec<SimTrace>,
}

/// Summary of an ensemble run.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct NetsmpcSummary {
    pub paths: usize,
    pub steps: usize,
    pub msb: f64,
    pub msb_stderr: f64,
    pub msb_argmax: usize,
    pub input_peak: f64,
    pub windows: usize,
    pub infeasible_windows: usize,
    pub aborted_paths: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> NetsmpcStatus {
    match e.exit_code() {
        2 => NetsmpcStatus::Config,
        3 => NetsmpcStatus::Assumption,
        4 => NetsmpcStatus::Solver,
        5 => NetsmpcStatus::Io,
        _ => NetsmpcStatus::Internal,
    }
}

fn fail(status: NetsmpcStatus, msg: impl Into<String>) -> NetsmpcStatus {
    set_error(msg.into());
    status
}

/// Run `f`, translating errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), (NetsmpcStatus, String)>) -> NetsmpcStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NetsmpcStatus::Ok,
        Ok(Err((s, m))) => fail(s, m),
        Err(_) => fail(NetsmpcStatus::Panic, "internal panic"),
    }
}

fn lift(e: Error) -> (NetsmpcStatus, String) {
    (status_of(&e), e.to_string())
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (NetsmpcStatus, String)> {
    if p.is_null() {
        return Err((NetsmpcStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (NetsmpcStatus::Config, format!("{what} is not valid UTF-8")))
}

fn null(what: &str) -> (NetsmpcStatus, String) {
    (NetsmpcStatus::NullArgument, format!("{what} is null"))
}

/// Message for the most recent failure on this thread, or null. The pointer
/// stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn netsmpc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn netsmpc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Build an experiment from TOML text, or from the bundled benchmark when
/// `toml` is null. `cache_dir` selects the moment cache; null keeps moments in
/// memory. `base_dir` resolves relative paths in the file and may be null.
///
/// # Safety
/// String arguments must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn netsmpc_experiment_new(
    toml: *const c_char,
    base_dir: *const c_char,
    cache_dir: *const c_char,
    out: *mut *mut NetsmpcExperiment,
) -> NetsmpcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let base = if base_dir.is_null() {
            PathBuf::from(".")
        } else {
            PathBuf::from(str_arg(base_dir, "base_dir")?)
        };
        let cfg = if toml.is_null() {
            ExperimentConfig::benchmark()
        } else {
            ExperimentConfig::from_toml(str_arg(toml, "toml")?, &base).map_err(lift)?
        };
        let source = if cache_dir.is_null() {
            MomentSource::Memory
        } else {
            MomentSource::Cache(PathBuf::from(str_arg(cache_dir, "cache_dir")?))
        };
        let inner = Experiment::new(cfg, &source).map_err(lift)?;
        *out = Box::into_raw(Box::new(NetsmpcExperiment { inner }));
        Ok(())
    })
}

/// Override path count, step count and master seed. Zero leaves a value unchanged.
///
/// # Safety
/// `exp` must come from [`netsmpc_experiment_new`].
#[no_mangle]
pub unsafe extern "C" fn netsmpc_experiment_set_run(
    exp: *mut NetsmpcExperiment,
    paths: usize,
    steps: usize,
    seed: u64,
) -> NetsmpcStatus {
    guard(|| {
        let exp = exp.as_mut().ok_or_else(|| null("exp"))?;
        let mut cfg = exp.inner.config.clone();
        if paths > 0 {
            cfg.paths = paths;
        }
        if steps > 0 {
            cfg.steps = steps;
        }
        if seed > 0 {
            cfg.seed = seed;
        }
        let moments = exp.inner.moments.clone();
        exp.inner =
            Experiment::with_moments(cfg, exp.inner.analysis.clone(), moments).map_err(lift)?;
        Ok(())
    })
}

/// # Safety
/// `exp` must be null or come from [`netsmpc_experiment_new`], and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn netsmpc_experiment_free(exp: *mut NetsmpcExperiment) {
    if !exp.is_null() {
        drop(Box::from_raw(exp));
    }
}

/// Simulate all paths of the experiment.
///
/// # Safety
/// `exp` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn netsmpc_run(
    exp: *const NetsmpcExperiment,
    out: *mut *mut NetsmpcEnsemble,
) -> NetsmpcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let exp = exp.as_ref().ok_or_else(|| null("exp"))?;
        let (report, traces) = run_ensemble(&exp.inner).map_err(lift)?;
        *out = Box::into_raw(Box::new(NetsmpcEnsemble { report, traces }));
        Ok(())
    })
}

/// # Safety
/// `ens` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn netsmpc_ensemble_summary(
    ens: *const NetsmpcEnsemble,
    out: *mut NetsmpcSummary,
) -> NetsmpcStatus {
    guard(|| {
        let ens = ens.as_ref().ok_or_else(|| null("ens"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let r = &ens.report;
        *out = NetsmpcSummary {
            paths: r.paths,
            steps: r.per_t.len(),
            msb: r.msb.sup,
            msb_stderr: r.msb.stderr,
            msb_argmax: r.msb.argmax,
            input_peak: r.input_peak,
            windows: r.windows,
            infeasible_windows: r.infeasible_windows,
            aborted_paths: r.aborted_paths,
        };
        Ok(())
    })
}

/// Copy the cross-path mean of `‖eᴼ_t‖²` into `buf`, up to `len` entries.
/// `written` receives the number of steps available.
///
/// # Safety
/// `buf` must hold `len` doubles; `written` must be writable.
#[no_mangle]
pub unsafe extern "C" fn netsmpc_ensemble_msb_curve(
    ens: *const NetsmpcEnsemble,
    buf: *mut f64,
    len: usize,
    written: *mut usize,
) -> NetsmpcStatus {
    guard(|| {
        let ens = ens.as_ref().ok_or_else(|| null("ens"))?;
        let written = written.as_mut().ok_or_else(|| null("written"))?;
        let curve = &ens.report.msb.per_t;
        *written = curve.len();
        if len > 0 {
            if buf.is_null() {
                return Err(null("buf"));
            }
            let dst = std::slice::from_raw_parts_mut(buf, len);
            for (d, p) in dst.iter_mut().zip(curve) {
                *d = p.eo2_mean;
            }
        }
        Ok(())
    })
}

/// Write `trace.csv` and `ensemble.csv` into `dir`.
///
/// # Safety
/// `ens` must be a live handle; `dir` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn netsmpc_ensemble_write_csv(
    ens: *const NetsmpcEnsemble,
    dir: *const c_char,
) -> NetsmpcStatus {
    guard(|| {
        let ens = ens.as_ref().ok_or_else(|| null("ens"))?;
        let dir = Path::new(str_arg(dir, "dir")?);
        std::fs::create_dir_all(dir).map_err(|e| lift(e.into()))?;
        write_trace_csv(&dir.join("trace.csv"), &ens.traces).map_err(lift)?;
        write_ensemble_csv(&dir.join("ensemble.csv"), &ens.report).map_err(lift)?;
        Ok(())
    })
}

/// # Safety
/// `ens` must be null or a live handle, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn netsmpc_ensemble_free(ens: *mut NetsmpcEnsemble) {
    if !ens.is_null() {
        drop(Box::from_raw(ens));
    }
}
