//! C ABI over the zerodiff pipeline: opaque handles, integer status codes
//! and a thread-local last-error message. All returned strings are owned by
//! the library and must be released with `zd_string_free`.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::path::Path;

use zerodiff::diffusion::{build_vp_schedule, DiffusionSchedule};
use zerodiff::pipeline::{run_experiment, ExperimentConfig};
use zerodiff::Error;

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZdStatus {
    ZdOk = 0,
    ZdConfigError = 1,
    ZdRuntimeError = 2,
    ZdIoError = 3,
    ZdNullPointer = 4,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

fn status_of(err: &Error) -> ZdStatus {
    match err {
        Error::Config(_)
        | Error::InvalidInput(_)
        | Error::DimMismatch(_)
        | Error::StepOutOfRange { .. } => ZdStatus::ZdConfigError,
        Error::Io { .. } | Error::Malformed { .. } | Error::Json(_) => ZdStatus::ZdIoError,
        _ => ZdStatus::ZdRuntimeError,
    }
}

fn fail(err: &Error) -> ZdStatus {
    set_error(&err.to_string());
    status_of(err)
}

/// Message describing the most recent error on this thread; empty string if
/// none. The pointer stays valid until the next failing call on the thread.
#[no_mangle]
pub extern "C" fn zd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Opaque diffusion schedule handle.
pub struct ZdSchedule(DiffusionSchedule);

/// Opaque experiment configuration handle.
pub struct ZdConfig(ExperimentConfig);

unsafe fn cstr<'a>(ptr: *const c_char) -> Option<&'a str> {
    if ptr.is_null() {
        return None;
    }
    CStr::from_ptr(ptr).to_str().ok()
}

/// Build the VP discretization with `t_max` steps.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn zd_schedule_new(
    t_max: u32,
    beta_min: f64,
    beta_max: f64,
    out: *mut *mut ZdSchedule,
) -> ZdStatus {
    if out.is_null() {
        set_error("out pointer is null");
        return ZdStatus::ZdNullPointer;
    }
    match build_vp_schedule(t_max as usize, beta_min, beta_max) {
        Ok(s) => {
            *out = Box::into_raw(Box::new(ZdSchedule(s)));
            ZdStatus::ZdOk
        }
        Err(e) => fail(&e),
    }
}

/// # Safety
/// `schedule` must come from `zd_schedule_new` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn zd_schedule_free(schedule: *mut ZdSchedule) {
    if !schedule.is_null() {
        drop(Box::from_raw(schedule));
    }
}

macro_rules! schedule_getter {
    ($name:ident, $method:ident, $doc:literal) => {
        #[doc = $doc]
        ///
        /// # Safety
        /// `schedule` and `out` must be valid pointers.
        #[no_mangle]
        pub unsafe extern "C" fn $name(
            schedule: *const ZdSchedule,
            t: u32,
            out: *mut f64,
        ) -> ZdStatus {
            let (Some(s), false) = (schedule.as_ref(), out.is_null()) else {
                set_error("null pointer");
                return ZdStatus::ZdNullPointer;
            };
            match s.0.check_step(t as usize) {
                Ok(()) => {
                    *out = s.0.$method(t as usize);
                    ZdStatus::ZdOk
                }
                Err(e) => fail(&e),
            }
        }
    };
}

schedule_getter!(zd_schedule_beta, beta, "Discrete beta_t for t in 1..=t_max.");
schedule_getter!(zd_schedule_kappa, kappa, "Noise-to-data ratio kappa_t = 1 - sqrt(alpha_bar_t).");

/// Cumulative alpha_bar_t for t in 0..=t_max.
///
/// # Safety
/// `schedule` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn zd_schedule_alpha_bar(
    schedule: *const ZdSchedule,
    t: u32,
    out: *mut f64,
) -> ZdStatus {
    let (Some(s), false) = (schedule.as_ref(), out.is_null()) else {
        set_error("null pointer");
        return ZdStatus::ZdNullPointer;
    };
    if t as usize > s.0.t_max {
        return fail(&Error::StepOutOfRange { t: t as usize, max: s.0.t_max });
    }
    *out = s.0.alpha_bar(t as usize);
    ZdStatus::ZdOk
}

/// Default experiment configuration.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn zd_config_default(out: *mut *mut ZdConfig) -> ZdStatus {
    if out.is_null() {
        set_error("out pointer is null");
        return ZdStatus::ZdNullPointer;
    }
    *out = Box::into_raw(Box::new(ZdConfig(ExperimentConfig::default())));
    ZdStatus::ZdOk
}

/// Parse a JSON experiment configuration (missing fields take defaults).
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn zd_config_from_json(
    json: *const c_char,
    out: *mut *mut ZdConfig,
) -> ZdStatus {
    let (Some(text), false) = (cstr(json), out.is_null()) else {
        set_error("null or non-UTF8 pointer");
        return ZdStatus::ZdNullPointer;
    };
    let cfg: ExperimentConfig = match serde_json::from_str(text) {
        Ok(c) => c,
        Err(e) => {
            set_error(&e.to_string());
            return ZdStatus::ZdConfigError;
        }
    };
    if let Err(e) = cfg.train.validate() {
        return fail(&e);
    }
    *out = Box::into_raw(Box::new(ZdConfig(cfg)));
    ZdStatus::ZdOk
}

/// # Safety
/// `config` must come from a `zd_config_*` constructor, freed once.
#[no_mangle]
pub unsafe extern "C" fn zd_config_free(config: *mut ZdConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Run the full pipeline, writing artifacts under `out_dir`. On success
/// `metrics_json` receives the metrics report as an owned JSON string.
///
/// # Safety
/// All pointers must be valid; `out_dir` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn zd_run_experiment(
    config: *const ZdConfig,
    out_dir: *const c_char,
    metrics_json: *mut *mut c_char,
) -> ZdStatus {
    let (Some(cfg), Some(dir), false) = (config.as_ref(), cstr(out_dir), metrics_json.is_null())
    else {
        set_error("null or non-UTF8 pointer");
        return ZdStatus::ZdNullPointer;
    };
    match run_experiment(&cfg.0, Path::new(dir)) {
        Ok(res) => {
            let json = serde_json::to_string(&res.report).unwrap();
            *metrics_json = CString::new(json).unwrap().into_raw();
            ZdStatus::ZdOk
        }
        Err(e) => fail(&e),
    }
}

/// Harmonic mean H = 2SU/(S+U); 0 when both are 0.
#[no_mangle]
pub extern "C" fn zd_harmonic_mean(s: f64, u: f64) -> f64 {
    zerodiff::zsl::harmonic_mean(s, u)
}

/// Release a string returned by this library.
///
/// # Safety
/// `s` must come from this library and be freed exactly once.
#[no_mangle]
pub unsafe extern "C" fn zd_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
