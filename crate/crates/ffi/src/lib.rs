//! C ABI over the flashspec engine.
//!
//! Every fallible call returns an [`FsStatus`] and writes its result through an
//! out pointer. On failure the message is kept per thread and can be read with
//! [`fs_last_error`]. Handles are opaque and must be released with their
//! matching `_free` function. Strings returned to the caller are owned by the
//! caller and released with [`fs_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use flashspec::drafting::LatencyProfile;
use flashspec::harness::{report_csv, report_json, run_experiment, trace_csv, Experiment, ExperimentConfig};
use flashspec::simulator::{ar_step_latency, preset, seed_profile, verify_latency, HardwareConfig};
use flashspec::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Contract = 4,
    Structure = 5,
    Divergence = 6,
    Io = 7,
    Serialization = 8,
    OutOfRange = 9,
    Panic = 10,
}

/// A hardware description, built from a preset or JSON.
pub struct FsHardware(HardwareConfig);

/// A latency profile seeded from a hardware description.
pub struct FsProfile(LatencyProfile);

/// A finished experiment with its report and per-trial outputs.
pub struct FsExperiment(Experiment);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(FsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Structure(_) | Error::DuplicateInsert { .. } => FsStatus::Structure,
            Error::Contract(_) => FsStatus::Contract,
            Error::Config(_) => FsStatus::Config,
            Error::Divergence { .. } => FsStatus::Divergence,
            Error::Io(_) => FsStatus::Io,
            Error::Json(_) | Error::Csv(_) => FsStatus::Serialization,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: FsStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Runs `f`, records any error or panic and maps it to a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            FsStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            FsStatus::Panic
        }
    }
}

unsafe fn read_str<'a>(s: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if s.is_null() {
        return Err(fail(FsStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(s).to_str().map_err(|_| fail(FsStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| fail(FsStatus::NullPointer, format!("{what} is null")))
}

unsafe fn write_out<T>(out: *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(fail(FsStatus::NullPointer, "output pointer is null"));
    }
    out.write(value);
    Ok(())
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|_| fail(FsStatus::Serialization, "string contains a NUL byte"))?;
    if out.is_null() {
        return Err(fail(FsStatus::NullPointer, "output pointer is null"));
    }
    out.write(c.into_raw());
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. The pointer stays
/// valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn fs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn fs_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Looks up a named hardware preset.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_hardware_preset(name: *const c_char, out: *mut *mut FsHardware) -> FsStatus {
    guard(|| {
        let hw = preset(read_str(name, "name")?)?;
        write_out(out, Box::into_raw(Box::new(FsHardware(hw))))
    })
}

/// Parses a hardware description from JSON.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_hardware_from_json(json: *const c_char, out: *mut *mut FsHardware) -> FsStatus {
    guard(|| {
        let hw: HardwareConfig = serde_json::from_str(read_str(json, "json")?).map_err(Error::from)?;
        hw.validate()?;
        write_out(out, Box::into_raw(Box::new(FsHardware(hw))))
    })
}

/// Serializes a hardware description to JSON.
///
/// # Safety
/// `hw` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_hardware_to_json(hw: *const FsHardware, out: *mut *mut c_char) -> FsStatus {
    guard(|| {
        let hw = deref(hw, "hardware")?;
        write_string(out, serde_json::to_string_pretty(&hw.0).map_err(Error::from)?)
    })
}

/// Latency of one autoregressive step in ms.
///
/// # Safety
/// `hw` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_hardware_ar_step_ms(hw: *const FsHardware, out: *mut f64) -> FsStatus {
    guard(|| write_out(out, ar_step_latency(&deref(hw, "hardware")?.0)))
}

/// Latency of one verification pass over a tree of `rows` nodes and `leaves`
/// leaves, in ms.
///
/// # Safety
/// `hw` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_hardware_verify_ms(
    hw: *const FsHardware,
    rows: usize,
    leaves: usize,
    out: *mut f64,
) -> FsStatus {
    guard(|| write_out(out, verify_latency(&deref(hw, "hardware")?.0, rows, leaves)?))
}

/// # Safety
/// `hw` must come from this library and not be freed twice. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn fs_hardware_free(hw: *mut FsHardware) {
    if !hw.is_null() {
        drop(Box::from_raw(hw));
    }
}

/// Seeds a latency profile with every shape up to `max_rows` rows.
/// A `penalty` of 0 selects the default.
///
/// # Safety
/// `hw` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_profile_seed(
    hw: *const FsHardware,
    max_rows: usize,
    penalty: f64,
    out: *mut *mut FsProfile,
) -> FsStatus {
    guard(|| {
        let penalty = if penalty == 0.0 { LatencyProfile::DEFAULT_PENALTY } else { penalty };
        let p = seed_profile(&deref(hw, "hardware")?.0, max_rows, penalty)?;
        write_out(out, Box::into_raw(Box::new(FsProfile(p))))
    })
}

/// Estimated latency for a tree shape, in ms.
///
/// # Safety
/// `profile` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_profile_estimate(
    profile: *const FsProfile,
    rows: usize,
    leaves: usize,
    out: *mut f64,
) -> FsStatus {
    guard(|| write_out(out, deref(profile, "profile")?.0.estimate((rows, leaves))?))
}

/// Serializes the profile's measured triples to JSON.
///
/// # Safety
/// `profile` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_profile_to_json(profile: *const FsProfile, out: *mut *mut c_char) -> FsStatus {
    guard(|| write_string(out, deref(profile, "profile")?.0.to_json()?))
}

/// # Safety
/// `profile` must come from this library and not be freed twice. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn fs_profile_free(profile: *mut FsProfile) {
    if !profile.is_null() {
        drop(Box::from_raw(profile));
    }
}

/// Runs an experiment from a JSON config. A previous report is also a valid
/// config and reproduces that run.
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_experiment_run(config_json: *const c_char, out: *mut *mut FsExperiment) -> FsStatus {
    guard(|| {
        let cfg = ExperimentConfig::from_json(read_str(config_json, "config")?, &[])?;
        let exp = run_experiment(&cfg)?;
        write_out(out, Box::into_raw(Box::new(FsExperiment(exp))))
    })
}

/// The full report as JSON.
///
/// # Safety
/// `exp` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_experiment_report_json(exp: *const FsExperiment, out: *mut *mut c_char) -> FsStatus {
    guard(|| write_string(out, report_json(&deref(exp, "experiment")?.0.report)?))
}

/// One CSV row per trial.
///
/// # Safety
/// `exp` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_experiment_report_csv(exp: *const FsExperiment, out: *mut *mut c_char) -> FsStatus {
    guard(|| write_string(out, report_csv(&deref(exp, "experiment")?.0.report)?))
}

/// One CSV row per decoding cycle across all trials.
///
/// # Safety
/// `exp` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_experiment_trace_csv(exp: *const FsExperiment, out: *mut *mut c_char) -> FsStatus {
    guard(|| write_string(out, trace_csv(&deref(exp, "experiment")?.0.runs)?))
}

/// Geometric-mean simulated throughput over trials, in tokens per second.
///
/// # Safety
/// `exp` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_experiment_tokens_per_s(exp: *const FsExperiment, out: *mut f64) -> FsStatus {
    guard(|| write_out(out, deref(exp, "experiment")?.0.report.aggregate.geomean_tokens_per_s))
}

/// Geometric-mean speedup over autoregressive decoding on the same device.
///
/// # Safety
/// `exp` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_experiment_speedup(exp: *const FsExperiment, out: *mut f64) -> FsStatus {
    guard(|| write_out(out, deref(exp, "experiment")?.0.report.aggregate.geomean_speedup_vs_flash_ar))
}

/// Mean accepted draft tokens per cycle.
///
/// # Safety
/// `exp` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_experiment_mean_accepted(exp: *const FsExperiment, out: *mut f64) -> FsStatus {
    guard(|| write_out(out, deref(exp, "experiment")?.0.report.aggregate.mean_accepted_len))
}

/// Number of trials in the experiment.
///
/// # Safety
/// `exp` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_experiment_trial_count(exp: *const FsExperiment, out: *mut usize) -> FsStatus {
    guard(|| write_out(out, deref(exp, "experiment")?.0.runs.len()))
}

/// Copies the generated tokens of `trial` into `buf`. `len` receives the
/// token count; when `buf` is NULL or `cap` is too small nothing is copied and
/// `len` still reports the required size.
///
/// # Safety
/// `exp` must be a live handle; `buf` must hold `cap` values or be NULL;
/// `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_experiment_tokens(
    exp: *const FsExperiment,
    trial: usize,
    buf: *mut u32,
    cap: usize,
    len: *mut usize,
) -> FsStatus {
    guard(|| {
        let runs = &deref(exp, "experiment")?.0.runs;
        let run = runs
            .get(trial)
            .ok_or_else(|| fail(FsStatus::OutOfRange, format!("trial {trial} out of range ({} trials)", runs.len())))?;
        write_out(len, run.tokens.len())?;
        if !buf.is_null() && cap >= run.tokens.len() {
            ptr::copy_nonoverlapping(run.tokens.as_ptr(), buf, run.tokens.len());
        }
        Ok(())
    })
}

/// # Safety
/// `exp` must come from this library and not be freed twice. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn fs_experiment_free(exp: *mut FsExperiment) {
    if !exp.is_null() {
        drop(Box::from_raw(exp));
    }
}
