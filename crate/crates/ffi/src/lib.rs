//! C ABI for the simulator.
//!
//! Configs and reports are opaque heap handles released with their `_free`
//! function. Every fallible call returns a [`SpecsimStatus`]; on failure
//! `specsim_last_error` describes the most recent error on the calling
//! thread. Strings returned through out-pointers are owned by the caller and
//! released with `specsim_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use specsim::analytics::{
    critical_fallback_ratio, ordinary_throughput, parallel_throughput, preferred_mode,
    ThroughputParams,
};
use specsim::metrics::{export_report, ExportFormat, MetricsReport};
use specsim::sim::{run_config, PolicyVariant};
use specsim::{validate_config, Error, Mode, SimConfig};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpecsimStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Unknown key, unparsable value or invalid configuration.
    InvalidConfig = 3,
    /// Arguments outside a formula's domain, such as L <= 1 for r*.
    Domain = 4,
    /// The simulation aborted (protocol violation or livelock).
    Simulation = 5,
    Io = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpecsimVariant {
    Ar = 0,
    Ordinary = 1,
    Parallel = 2,
    Hybrid = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpecsimMode {
    Ordinary = 0,
    Parallel = 1,
}

/// Inputs of the throughput model. Latencies are in seconds.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpecsimModelParams {
    pub batch: usize,
    pub accept_len: f64,
    pub gamma: usize,
    pub t_target: f64,
    pub t_draft: f64,
    /// Fallback ratio; only read by the parallel formula.
    pub rollback_ratio: f64,
}

/// Scalar summary of a report.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SpecsimReportSummary {
    pub seed: u64,
    pub target_throughput: f64,
    pub draft_throughput: f64,
    pub mean_accepted_length: f64,
    pub mean_rollback_ratio: f64,
    pub parallel_fraction: f64,
    pub sim_duration: f64,
    pub rounds: u64,
    pub total_committed: u64,
    pub requests_finished: u64,
    pub breaker_activations: u64,
}

/// Opaque configuration handle.
pub struct SpecsimConfig(SimConfig);

/// Opaque report handle.
pub struct SpecsimReport(MetricsReport);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let mut s = msg.into();
    s.retain(|c| c != '\0');
    let c = CString::new(s).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> SpecsimStatus {
    match e {
        Error::Config(_) | Error::Parse(_) | Error::UnknownPreset(_) | Error::Json(_) => {
            SpecsimStatus::InvalidConfig
        }
        Error::Domain(_) => SpecsimStatus::Domain,
        Error::Io(_) => SpecsimStatus::Io,
        Error::Assembly { .. } | Error::CommitRegression { .. } | Error::Livelock { .. } => {
            SpecsimStatus::Simulation
        }
    }
}

/// Runs `f`, recording the error message and mapping panics.
fn guard(f: impl FnOnce() -> Result<(), (SpecsimStatus, String)>) -> SpecsimStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SpecsimStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SpecsimStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (SpecsimStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (SpecsimStatus, String) {
    (SpecsimStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (SpecsimStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (SpecsimStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

fn out_string(out: *mut *mut c_char, s: String) -> Result<(), (SpecsimStatus, String)> {
    let c = CString::new(s).map_err(|_| (SpecsimStatus::Panic, "string has a nul byte".to_string()))?;
    unsafe { *out = c.into_raw() };
    Ok(())
}

fn model_params(p: &SpecsimModelParams) -> ThroughputParams {
    ThroughputParams::new(p.batch, p.accept_len, p.gamma, p.t_target, p.t_draft).with_r(p.rollback_ratio)
}

/// Message of the last failed call on this thread, or an empty string.
/// Valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn specsim_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn specsim_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn specsim_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// New config with default values.
#[no_mangle]
pub extern "C" fn specsim_config_new() -> *mut SpecsimConfig {
    Box::into_raw(Box::new(SpecsimConfig(SimConfig::default())))
}

/// Loads a `key = value` config file into a new handle.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn specsim_config_load(
    path: *const c_char,
    out: *mut *mut SpecsimConfig,
) -> SpecsimStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        let cfg = SimConfig::from_file(Path::new(path)).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(SpecsimConfig(cfg)));
        Ok(())
    })
}

/// # Safety
/// `cfg` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn specsim_config_free(cfg: *mut SpecsimConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Sets one config key from its text form.
///
/// # Safety
/// `cfg` must be a live handle; `key` and `value` nul-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn specsim_config_set(
    cfg: *mut SpecsimConfig,
    key: *const c_char,
    value: *const c_char,
) -> SpecsimStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| null("config"))?;
        let key = str_arg(key, "key")?;
        let value = str_arg(value, "value")?;
        cfg.0.set(key, value).map_err(lib_err)
    })
}

/// Writes the text form of one config key to `*out`.
///
/// # Safety
/// `cfg` must be a live handle; `key` a nul-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn specsim_config_get(
    cfg: *const SpecsimConfig,
    key: *const c_char,
    out: *mut *mut c_char,
) -> SpecsimStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("config"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let key = str_arg(key, "key")?;
        let v = cfg
            .0
            .get(key)
            .ok_or_else(|| (SpecsimStatus::InvalidConfig, format!("unknown config key `{key}`")))?;
        out_string(out, v)
    })
}

/// Checks every config invariant; the error lists all violations.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn specsim_config_validate(cfg: *const SpecsimConfig) -> SpecsimStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("config"))?;
        validate_config(cfg.0.clone())
            .map(|_| ())
            .map_err(|e| lib_err(e.into()))
    })
}

/// # Safety
/// `params` must point to a valid struct; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn specsim_ordinary_throughput(
    params: *const SpecsimModelParams,
    out: *mut f64,
) -> SpecsimStatus {
    guard(|| {
        let p = model_params(params.as_ref().ok_or_else(|| null("params"))?);
        p.check().map_err(lib_err)?;
        *out.as_mut().ok_or_else(|| null("out"))? = ordinary_throughput(&p);
        Ok(())
    })
}

/// # Safety
/// `params` must point to a valid struct; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn specsim_parallel_throughput(
    params: *const SpecsimModelParams,
    out: *mut f64,
) -> SpecsimStatus {
    guard(|| {
        let p = model_params(params.as_ref().ok_or_else(|| null("params"))?);
        p.check().map_err(lib_err)?;
        *out.as_mut().ok_or_else(|| null("out"))? = parallel_throughput(&p);
        Ok(())
    })
}

/// Critical rollback ratio r*. Fails with `Domain` when L <= 1.
///
/// # Safety
/// `params` must point to a valid struct; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn specsim_critical_ratio(
    params: *const SpecsimModelParams,
    out: *mut f64,
) -> SpecsimStatus {
    guard(|| {
        let p = model_params(params.as_ref().ok_or_else(|| null("params"))?);
        let r = critical_fallback_ratio(&p).map_err(lib_err)?;
        *out.as_mut().ok_or_else(|| null("out"))? = r;
        Ok(())
    })
}

/// PARALLEL when `rollback_ratio <= r_star`.
#[no_mangle]
pub extern "C" fn specsim_preferred_mode(rollback_ratio: f64, r_star: f64) -> SpecsimMode {
    match preferred_mode(rollback_ratio, r_star) {
        Mode::Parallel => SpecsimMode::Parallel,
        Mode::Ordinary => SpecsimMode::Ordinary,
    }
}

/// Runs one simulation of the configured workload.
///
/// # Safety
/// `cfg` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn specsim_run(
    cfg: *const SpecsimConfig,
    variant: SpecsimVariant,
    out: *mut *mut SpecsimReport,
) -> SpecsimStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("config"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let v = match variant {
            SpecsimVariant::Ar => PolicyVariant::Ar,
            SpecsimVariant::Ordinary => PolicyVariant::Ordinary,
            SpecsimVariant::Parallel => PolicyVariant::Parallel,
            SpecsimVariant::Hybrid => PolicyVariant::Hybrid,
        };
        let report = run_config(&cfg.0, v).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(SpecsimReport(report)));
        Ok(())
    })
}

/// # Safety
/// `report` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn specsim_report_summary(
    report: *const SpecsimReport,
    out: *mut SpecsimReportSummary,
) -> SpecsimStatus {
    guard(|| {
        let r = &report.as_ref().ok_or_else(|| null("report"))?.0;
        *out.as_mut().ok_or_else(|| null("out"))? = SpecsimReportSummary {
            seed: r.seed,
            target_throughput: r.target_throughput,
            draft_throughput: r.draft_throughput,
            mean_accepted_length: r.mean_accepted_length,
            mean_rollback_ratio: r.mean_rollback_ratio,
            parallel_fraction: r.parallel_fraction,
            sim_duration: r.sim_duration,
            rounds: r.rounds,
            total_committed: r.total_committed,
            requests_finished: r.requests_finished,
            breaker_activations: r.breaker_activations,
        };
        Ok(())
    })
}

/// Full report as JSON (`as_csv == false`) or as a CSV header and row.
///
/// # Safety
/// `report` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn specsim_report_export(
    report: *const SpecsimReport,
    as_csv: bool,
    out: *mut *mut c_char,
) -> SpecsimStatus {
    guard(|| {
        let r = &report.as_ref().ok_or_else(|| null("report"))?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        let format = if as_csv { ExportFormat::Csv } else { ExportFormat::Json };
        out_string(out, export_report(r, format).map_err(lib_err)?)
    })
}

/// # Safety
/// `report` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn specsim_report_free(report: *mut SpecsimReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}
