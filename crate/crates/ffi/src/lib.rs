//! C ABI over the `leap` library.
//!
//! Every fallible function returns a [`LeapStatus`]; on failure the message
//! is available from [`leap_last_error_message`] on the same thread. Objects
//! cross the boundary as opaque handles that must be released with their
//! matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use leap::checkpoint::Checkpoint;
use leap::config::RunConfig;
use leap::mask::topk_mask;
use leap::report::report_layer_densities;
use leap::schedule::{cubic_sparsity, ScheduleParams};
use leap::threshold::{adaptive_lambda, remaining_ratio, sparsity_reg_loss, ThresholdBank};
use leap::train::{provide_teacher, run_training};
use leap::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeapStatus {
    Ok = 0,
    NullPointer = 1,
    Dimension = 2,
    Input = 3,
    Usage = 4,
    Config = 5,
    Format = 6,
    NonFinite = 7,
    NotConverged = 8,
    Io = 9,
    Json = 10,
    Panic = 11,
}

/// Learnable thresholds and the target-ratio penalty settings.
pub struct LeapThresholdBank {
    bank: ThresholdBank,
}

/// A loaded checkpoint.
pub struct LeapCheckpoint {
    checkpoint: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> LeapStatus {
    match e {
        Error::Dimension(_) => LeapStatus::Dimension,
        Error::Input(_) => LeapStatus::Input,
        Error::Usage(_) => LeapStatus::Usage,
        Error::Config { .. } => LeapStatus::Config,
        Error::Format(_) => LeapStatus::Format,
        Error::NonFinite(_) => LeapStatus::NonFinite,
        Error::NotConverged { .. } => LeapStatus::NotConverged,
        Error::Io(_) => LeapStatus::Io,
        Error::Json(_) => LeapStatus::Json,
    }
}

struct NullArg(&'static str);

enum Failure {
    Null(NullArg),
    Leap(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Leap(e)
    }
}

impl From<NullArg> for Failure {
    fn from(e: NullArg) -> Self {
        Failure::Null(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LeapStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LeapStatus::Ok,
        Ok(Err(Failure::Null(NullArg(name)))) => {
            set_last_error(format!("`{name}` is null"));
            LeapStatus::NullPointer
        }
        Ok(Err(Failure::Leap(e))) => {
            set_last_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_last_error("internal panic".into());
            LeapStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &'static str) -> Result<*const T, NullArg> {
    if p.is_null() {
        Err(NullArg(name))
    } else {
        Ok(p)
    }
}

fn non_null_mut<T>(p: *mut T, name: &'static str) -> Result<*mut T, NullArg> {
    if p.is_null() {
        Err(NullArg(name))
    } else {
        Ok(p)
    }
}

/// # Safety
/// `p` must be null or point to `len` readable values.
unsafe fn input_slice<'a, T>(p: *const T, len: usize, name: &'static str) -> Result<&'a [T], NullArg> {
    if len == 0 {
        return Ok(&[]);
    }
    Ok(slice::from_raw_parts(non_null(p, name)?, len))
}

/// # Safety
/// `p` must be null or point to `len` writable values.
unsafe fn output_slice<'a, T>(p: *mut T, len: usize, name: &'static str) -> Result<&'a mut [T], NullArg> {
    if len == 0 {
        return Ok(&mut []);
    }
    Ok(slice::from_raw_parts_mut(non_null_mut(p, name)?, len))
}

/// # Safety
/// `p` must be null or a nul-terminated string.
unsafe fn input_str<'a>(p: *const c_char, name: &'static str) -> Result<&'a str, Failure> {
    CStr::from_ptr(non_null(p, name)?)
        .to_str()
        .map_err(|_| Failure::Leap(Error::Input(format!("`{name}` is not utf-8"))))
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn leap_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Top-K block mask of a row-major `rows x cols` score matrix into `out_mask`
/// (one byte per entry, 0 or 1).
///
/// # Safety
/// `scores` and `out_mask` must each hold `rows * cols` elements.
#[no_mangle]
pub unsafe extern "C" fn leap_topk_mask(
    scores: *const f64,
    rows: usize,
    cols: usize,
    keep_fraction: f64,
    out_mask: *mut u8,
) -> LeapStatus {
    guard(|| {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Dimension("rows * cols overflows".into()))?;
        let data = input_slice(scores, n, "scores")?.to_vec();
        let out = output_slice(out_mask, n, "out_mask")?;
        let mask = topk_mask(&Tensor::from_vec(rows, cols, data)?, keep_fraction)?;
        for (o, &b) in out.iter_mut().zip(mask.bits()) {
            *o = u8::from(b);
        }
        Ok(())
    })
}

/// Cubic sparsity at step `t`.
///
/// # Safety
/// `out` must point to a writable `double`.
#[no_mangle]
pub unsafe extern "C" fn leap_cubic_sparsity(
    t: f64,
    s0: f64,
    sf: f64,
    t0: u64,
    tc: u64,
    tf: u64,
    out: *mut f64,
) -> LeapStatus {
    guard(|| {
        let out = non_null_mut(out, "out")?;
        *out = cubic_sparsity(t, &ScheduleParams { s0, sf, t0, tc, tf })?;
        Ok(())
    })
}

/// New bank with every threshold at five times the temperature.
///
/// # Safety
/// `element_counts` must hold `len` values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn leap_threshold_bank_new(
    element_counts: *const usize,
    len: usize,
    temperature: f64,
    target_density: f64,
    lambda_max: f64,
    lambda_min: f64,
    out: *mut *mut LeapThresholdBank,
) -> LeapStatus {
    guard(|| {
        let out = non_null_mut(out, "out")?;
        let counts = input_slice(element_counts, len, "element_counts")?.to_vec();
        let bank = ThresholdBank::new(counts, temperature, target_density, lambda_max, lambda_min)?;
        *out = Box::into_raw(Box::new(LeapThresholdBank { bank }));
        Ok(())
    })
}

/// # Safety
/// `bank` must be null or a handle from [`leap_threshold_bank_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn leap_threshold_bank_free(bank: *mut LeapThresholdBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

/// Number of thresholds in the bank.
///
/// # Safety
/// `bank` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn leap_threshold_bank_len(bank: *const LeapThresholdBank, out: *mut usize) -> LeapStatus {
    guard(|| {
        let bank = &*non_null(bank, "bank")?;
        *non_null_mut(out, "out")? = bank.bank.len();
        Ok(())
    })
}

/// Replace all thresholds; `len` must equal the bank length.
///
/// # Safety
/// `bank` must be a live handle and `sigma` hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn leap_threshold_bank_set_sigma(
    bank: *mut LeapThresholdBank,
    sigma: *const f64,
    len: usize,
) -> LeapStatus {
    guard(|| {
        let bank = &mut *non_null_mut(bank, "bank")?;
        let values = input_slice(sigma, len, "sigma")?;
        if len != bank.bank.len() {
            return Err(Error::Dimension(format!("{len} thresholds for a bank of {}", bank.bank.len())).into());
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("threshold".into()).into());
        }
        bank.bank.sigma_mut().copy_from_slice(values);
        Ok(())
    })
}

/// Per-matrix keep fractions `sigmoid(σ_i / T)` into `out` (`len` slots).
///
/// # Safety
/// `bank` must be a live handle and `out` hold `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn leap_threshold_bank_densities(
    bank: *const LeapThresholdBank,
    out: *mut f64,
    len: usize,
) -> LeapStatus {
    guard(|| {
        let bank = &*non_null(bank, "bank")?;
        if len != bank.bank.len() {
            return Err(Error::Dimension(format!("{len} slots for a bank of {}", bank.bank.len())).into());
        }
        output_slice(out, len, "out")?.copy_from_slice(&bank.bank.densities());
        Ok(())
    })
}

/// Count-weighted remaining ratio.
///
/// # Safety
/// `bank` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn leap_threshold_bank_remaining_ratio(
    bank: *const LeapThresholdBank,
    out: *mut f64,
) -> LeapStatus {
    guard(|| {
        let bank = &*non_null(bank, "bank")?;
        *non_null_mut(out, "out")? = remaining_ratio(&bank.bank);
        Ok(())
    })
}

/// One-sided squared excess of the remaining ratio over the target.
///
/// # Safety
/// `bank` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn leap_threshold_bank_reg_loss(bank: *const LeapThresholdBank, out: *mut f64) -> LeapStatus {
    guard(|| {
        let bank = &*non_null(bank, "bank")?;
        *non_null_mut(out, "out")? = sparsity_reg_loss(remaining_ratio(&bank.bank), bank.bank.target_ratio());
        Ok(())
    })
}

/// Adaptive regularization coefficient at the current thresholds.
///
/// # Safety
/// `bank` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn leap_threshold_bank_adaptive_lambda(
    bank: *const LeapThresholdBank,
    out: *mut f64,
) -> LeapStatus {
    guard(|| {
        let bank = &*non_null(bank, "bank")?;
        let reg = sparsity_reg_loss(remaining_ratio(&bank.bank), bank.bank.target_ratio());
        *non_null_mut(out, "out")? = adaptive_lambda(reg, &bank.bank)?;
        Ok(())
    })
}

/// # Safety
/// `path` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn leap_checkpoint_open(path: *const c_char, out: *mut *mut LeapCheckpoint) -> LeapStatus {
    guard(|| {
        let out = non_null_mut(out, "out")?;
        let path = input_str(path, "path")?;
        let checkpoint = Checkpoint::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(LeapCheckpoint { checkpoint }));
        Ok(())
    })
}

/// # Safety
/// `checkpoint` must be null or a handle from [`leap_checkpoint_open`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn leap_checkpoint_free(checkpoint: *mut LeapCheckpoint) {
    if !checkpoint.is_null() {
        drop(Box::from_raw(checkpoint));
    }
}

/// Number of prunable matrices.
///
/// # Safety
/// `checkpoint` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn leap_checkpoint_matrix_count(
    checkpoint: *const LeapCheckpoint,
    out: *mut usize,
) -> LeapStatus {
    guard(|| {
        let ck = &*non_null(checkpoint, "checkpoint")?;
        *non_null_mut(out, "out")? = ck.checkpoint.model.num_prunable();
        Ok(())
    })
}

/// Per-matrix densities (keep fractions when the checkpoint has thresholds,
/// mask densities otherwise) into `out` (`len` slots).
///
/// # Safety
/// `checkpoint` must be a live handle and `out` hold `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn leap_checkpoint_densities(
    checkpoint: *const LeapCheckpoint,
    out: *mut f64,
    len: usize,
) -> LeapStatus {
    guard(|| {
        let ck = &*non_null(checkpoint, "checkpoint")?;
        let report = report_layer_densities(&ck.checkpoint)?;
        if len != report.matrices.len() {
            return Err(Error::Dimension(format!("{len} slots for {} matrices", report.matrices.len())).into());
        }
        let out = output_slice(out, len, "out")?;
        for (o, m) in out.iter_mut().zip(&report.matrices) {
            *o = m.density;
        }
        Ok(())
    })
}

/// Run one training from a JSON config, writing outputs to its `out_dir`. On
/// success `*out_summary` receives the summary as JSON, to be released with
/// [`leap_string_free`].
///
/// # Safety
/// `config_json` must be a nul-terminated string and `out_summary` writable.
#[no_mangle]
pub unsafe extern "C" fn leap_train_json(config_json: *const c_char, out_summary: *mut *mut c_char) -> LeapStatus {
    guard(|| {
        let out = non_null_mut(out_summary, "out_summary")?;
        let config = RunConfig::from_json(input_str(config_json, "config_json")?)?;
        let teacher = provide_teacher(&config, &config.out_dir)?;
        let outcome = run_training(&config, teacher.as_ref(), Some(&config.out_dir))?;
        let json = serde_json::to_string(&outcome.summary).map_err(Error::from)?;
        *out = CString::new(json).expect("json has no nul").into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn leap_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
