//! C ABI over `mismatch-lab`.
//!
//! Every fallible call returns an [`MlStatus`]; on failure a message is kept
//! per thread and can be read with [`ml_last_error_message`]. Objects are
//! opaque handles created by `*_new` functions and released by the matching
//! `*_free`. Strings returned to the caller must be released with
//! [`ml_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use mismatch_lab::harness::{train, ExperimentConfig};
use mismatch_lab::monitor::{detect_surge, SurgeDetectorState};
use mismatch_lab::oracle;
use mismatch_lab::scheduler::SchedulerState;
use mismatch_lab::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidConfig = 3,
    Numeric = 4,
    Contract = 5,
    EmptyBatch = 6,
    BudgetExceeded = 7,
    UnknownSuite = 8,
    Io = 9,
    /// The surge detector has not fired yet.
    NotTriggered = 10,
    /// A Rust panic was caught at the boundary.
    Panic = 11,
    VerificationFailed = 12,
}

/// Length-triggered learning-rate scheduler.
pub struct MlScheduler(SchedulerState);

/// Response-length surge detector.
pub struct MlSurgeDetector(SurgeDetectorState);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = s);
}

fn status_of(err: &Error) -> MlStatus {
    match err {
        Error::BudgetExceeded { .. } => MlStatus::BudgetExceeded,
        Error::Config(_) | Error::Json(_) => MlStatus::InvalidConfig,
        Error::Numeric(_) => MlStatus::Numeric,
        Error::Contract(_) => MlStatus::Contract,
        Error::EmptyBatch => MlStatus::EmptyBatch,
        Error::UnknownSuite(_) => MlStatus::UnknownSuite,
        Error::Io(_) | Error::Csv(_) => MlStatus::Io,
    }
}

fn guard(f: impl FnOnce() -> Result<(), MlStatus>) -> MlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MlStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("panic inside mismatch-lab");
            MlStatus::Panic
        }
    }
}

fn fail(err: Error) -> MlStatus {
    set_error(err.to_string());
    status_of(&err)
}

fn null(what: &str) -> MlStatus {
    set_error(format!("{what} is null"));
    MlStatus::NullPointer
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, MlStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(format!("{what} is not valid UTF-8"));
        MlStatus::InvalidUtf8
    })
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s).map_or(ptr::null_mut(), CString::into_raw)
}

/// Message for the last failed call on this thread; empty if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ml_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ml_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn ml_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

unsafe fn store<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

/// Fixed-period scheduler: halves every `t_decay` steps, floored at `eta_inf`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ml_scheduler_new_fixed(
    eta_0: f64,
    eta_inf: f64,
    t_decay: u64,
    out: *mut *mut MlScheduler,
) -> MlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let s = SchedulerState::fixed(eta_0, eta_inf, t_decay).map_err(fail)?;
        store(out, MlScheduler(s));
        Ok(())
    })
}

/// Adaptive scheduler, armed later with [`ml_scheduler_arm`].
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ml_scheduler_new_adaptive(
    eta_0: f64,
    eta_inf: f64,
    heuristic_factor: f64,
    out: *mut *mut MlScheduler,
) -> MlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let s = SchedulerState::adaptive(eta_0, eta_inf, heuristic_factor).map_err(fail)?;
        store(out, MlScheduler(s));
        Ok(())
    })
}

/// Moves to step `t` (the next step) and writes the learning rate.
///
/// # Safety
/// `handle` and `lr` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ml_scheduler_advance(handle: *mut MlScheduler, t: u64, lr: *mut f64) -> MlStatus {
    guard(|| {
        let h = handle.as_mut().ok_or_else(|| null("handle"))?;
        if lr.is_null() {
            return Err(null("lr"));
        }
        *lr = h.0.advance(t).map_err(fail)?;
        Ok(())
    })
}

/// Closed-form learning rate at step `t`.
///
/// # Safety
/// `handle` and `lr` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ml_scheduler_lr_at_step(handle: *const MlScheduler, t: u64, lr: *mut f64) -> MlStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        if lr.is_null() {
            return Err(null("lr"));
        }
        *lr = h.0.lr_at_step(t);
        Ok(())
    })
}

/// Sets the decay period from a surge step and writes it to `period`.
///
/// # Safety
/// `handle` and `period` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ml_scheduler_arm(handle: *mut MlScheduler, surge_step: u64, period: *mut u64) -> MlStatus {
    guard(|| {
        let h = handle.as_mut().ok_or_else(|| null("handle"))?;
        if period.is_null() {
            return Err(null("period"));
        }
        *period = h.0.arm_from_surge(surge_step).map_err(fail)?;
        Ok(())
    })
}

/// # Safety
/// `handle` must come from a scheduler constructor and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn ml_scheduler_free(handle: *mut MlScheduler) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ml_surge_new(window: usize, surge_factor: f64, out: *mut *mut MlSurgeDetector) -> MlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let s = SurgeDetectorState::new(window, surge_factor).map_err(fail)?;
        store(out, MlSurgeDetector(s));
        Ok(())
    })
}

/// Feeds one step's average response length. `triggered` is set to 1 once
/// the surge has been detected.
///
/// # Safety
/// `handle` must be valid; `triggered` may be null.
#[no_mangle]
pub unsafe extern "C" fn ml_surge_observe(
    handle: *mut MlSurgeDetector,
    step: u64,
    avg_length: f64,
    triggered: *mut u8,
) -> MlStatus {
    guard(|| {
        let h = handle.as_mut().ok_or_else(|| null("handle"))?;
        if !avg_length.is_finite() {
            set_error("avg_length must be finite");
            return Err(MlStatus::Numeric);
        }
        let state = std::mem::replace(&mut h.0, SurgeDetectorState::new(1, 1.0).map_err(fail)?);
        h.0 = detect_surge(state, step, avg_length);
        if let Some(t) = triggered.as_mut() {
            *t = u8::from(h.0.triggered());
        }
        Ok(())
    })
}

/// Writes the surge step, or returns `NotTriggered`.
///
/// # Safety
/// `handle` and `step` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ml_surge_step(handle: *const MlSurgeDetector, step: *mut u64) -> MlStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        if step.is_null() {
            return Err(null("step"));
        }
        match h.0.surge_step {
            Some(s) => {
                *step = s;
                Ok(())
            }
            None => {
                set_error("no surge detected yet");
                Err(MlStatus::NotTriggered)
            }
        }
    })
}

/// # Safety
/// `handle` must come from [`ml_surge_new`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn ml_surge_free(handle: *mut MlSurgeDetector) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Runs one training job from a JSON configuration and returns the run log
/// as JSON in `*out` (free with [`ml_string_free`]).
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ml_train_json(config_json: *const c_char, out: *mut *mut c_char) -> MlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = read_str(config_json, "config_json")?;
        let cfg = ExperimentConfig::from_json_str(text).map_err(fail)?;
        let log = train(&cfg).map_err(fail)?;
        *out = into_c_string(log.to_json().map_err(fail)?);
        Ok(())
    })
}

/// Evaluates the horizon bound and both lemmas on the default grid. Writes
/// the number of grid points and of failed points; returns
/// `VerificationFailed` if any point fails. When `report_json` is non-null it
/// receives the per-point reports (free with [`ml_string_free`]).
///
/// # Safety
/// `points` and `failures` must be valid; `report_json` may be null.
#[no_mangle]
pub unsafe extern "C" fn ml_verify_theorem_grid(
    points: *mut usize,
    failures: *mut usize,
    report_json: *mut *mut c_char,
) -> MlStatus {
    guard(|| {
        if points.is_null() || failures.is_null() {
            return Err(null("points/failures"));
        }
        let reports = oracle::run_grid(&oracle::default_grid()).map_err(fail)?;
        let bad = reports.iter().filter(|r| !r.passed(1e-10, 1e-10)).count();
        *points = reports.len();
        *failures = bad;
        if !report_json.is_null() {
            let s = serde_json::to_string(&reports).map_err(|e| fail(e.into()))?;
            *report_json = into_c_string(s);
        }
        if bad > 0 {
            set_error(format!("{bad} of {} grid points failed", reports.len()));
            return Err(MlStatus::VerificationFailed);
        }
        Ok(())
    })
}
