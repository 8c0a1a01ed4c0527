//! C bindings for the helix imputation library.
//!
//! A checkpoint produced by `helix train` is opened into an opaque handle;
//! callers then impute raw `[t_len, n_features]` series through it. Every
//! function returns a [`HelixStatus`], and the message behind the most
//! recent failure on the current thread is available from
//! [`helix_last_error`].
//!
//! Buffers are row-major with time as the leading axis. Mask bytes are 1
//! where the value is observed and 0 where it is missing; observed entries
//! pass through imputation unchanged.

use helix_core::checkpoint::{load_checkpoint, Checkpoint};
use helix_core::cli::{helix_impute_series, CliError};
use helix_core::data::Dataset;
use helix_core::tensor::Tensor;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

/// Result of every API call. Mirrors the CLI exit codes: 0 success,
/// 1 bad arguments, 2 unusable data or files, 3 numeric failure.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HelixStatus {
    Ok = 0,
    Usage = 1,
    Data = 2,
    Numeric = 3,
}

/// Opaque trained-model handle. Create with `helix_load_checkpoint`,
/// release with `helix_free`. A handle is immutable and may be shared
/// across threads.
pub struct HelixHandle {
    ckpt: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: &str) {
    let sanitized: String = message.chars().map(|c| if c == '\0' { ' ' } else { c }).collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).expect("NUL bytes stripped");
    });
}

fn fail(status: HelixStatus, message: &str) -> HelixStatus {
    set_last_error(message);
    status
}

fn fail_with(error: CliError) -> HelixStatus {
    let status = match error.exit_code() {
        1 => HelixStatus::Usage,
        3 => HelixStatus::Numeric,
        _ => HelixStatus::Data,
    };
    fail(status, error.message())
}

/// Runs `body` shielding the C caller from unwinds; a panic reports
/// `HelixStatus::Numeric` with the panic payload as the error message.
fn guarded(body: impl FnOnce() -> HelixStatus) -> HelixStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(payload) => {
            let detail = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(HelixStatus::Numeric, &format!("internal panic: {}", detail))
        }
    }
}

/// Returns the library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn helix_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Returns the message behind the most recent failure on this thread, or
/// an empty string when nothing has failed. The pointer stays valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn helix_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Opens a checkpoint file written by `helix train`.
///
/// On success writes a handle to `out` and returns `Ok`; the caller owns
/// the handle and must release it with `helix_free`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn helix_load_checkpoint(
    path: *const c_char,
    out: *mut *mut HelixHandle,
) -> HelixStatus {
    guarded(|| {
        if path.is_null() || out.is_null() {
            return fail(HelixStatus::Usage, "helix_load_checkpoint: null pointer argument");
        }
        let path = match unsafe { CStr::from_ptr(path) }.to_str() {
            Ok(p) => p,
            Err(_) => return fail(HelixStatus::Usage, "helix_load_checkpoint: path is not valid UTF-8"),
        };
        match load_checkpoint(path.as_ref()) {
            Ok(ckpt) => {
                unsafe { *out = Box::into_raw(Box::new(HelixHandle { ckpt })) };
                HelixStatus::Ok
            }
            Err(e) => fail_with(e.into()),
        }
    })
}

/// Number of features (columns) the loaded model expects.
///
/// # Safety
/// `handle` must be a live pointer from `helix_load_checkpoint`.
#[no_mangle]
pub unsafe extern "C" fn helix_n_features(handle: *const HelixHandle) -> usize {
    if handle.is_null() {
        return 0;
    }
    unsafe { &*handle }.ckpt.config.model.n_features
}

/// Window length the model was trained with. Series passed to
/// `helix_impute` should be at least this long.
///
/// # Safety
/// `handle` must be a live pointer from `helix_load_checkpoint`.
#[no_mangle]
pub unsafe extern "C" fn helix_t_window(handle: *const HelixHandle) -> usize {
    if handle.is_null() {
        return 0;
    }
    unsafe { &*handle }.ckpt.config.t_window
}

/// Fills the missing entries of a series.
///
/// `values` and `out` are `t_len * n_features` doubles, row-major with
/// time leading; `mask` holds one byte per entry, 1 observed, 0 missing.
/// Observed entries are copied through unchanged; missing entries receive
/// model predictions on the original data scale. `out` may alias `values`.
///
/// # Safety
/// `handle` must be live, and the three buffers must match the stated
/// sizes.
#[no_mangle]
pub unsafe extern "C" fn helix_impute(
    handle: *const HelixHandle,
    values: *const f64,
    mask: *const u8,
    t_len: usize,
    n_features: usize,
    out: *mut f64,
) -> HelixStatus {
    guarded(|| {
        if handle.is_null() || values.is_null() || mask.is_null() || out.is_null() {
            return fail(HelixStatus::Usage, "helix_impute: null pointer argument");
        }
        if t_len == 0 || n_features == 0 {
            return fail(HelixStatus::Usage, "helix_impute: t_len and n_features must be positive");
        }
        let ckpt = &unsafe { &*handle }.ckpt;
        let n = t_len * n_features;
        let values = unsafe { std::slice::from_raw_parts(values, n) };
        let mask_bytes = unsafe { std::slice::from_raw_parts(mask, n) };
        if let Some(&bad) = mask_bytes.iter().find(|&&m| m > 1) {
            return fail(
                HelixStatus::Usage,
                &format!("helix_impute: mask byte {} is neither 0 nor 1", bad),
            );
        }
        let result = (|| -> Result<Tensor, CliError> {
            let shape = vec![t_len, n_features];
            let values = Tensor::new(shape.clone(), values.to_vec())?;
            let mask = Tensor::new(shape, mask_bytes.iter().map(|&m| m as f64).collect())?;
            let data = Dataset { times: (0..t_len as i64).collect(), values, mask };
            helix_impute_series(ckpt, &data)
        })();
        match result {
            Ok(filled) => {
                unsafe { std::slice::from_raw_parts_mut(out, n) }.copy_from_slice(filled.data());
                HelixStatus::Ok
            }
            Err(e) => fail_with(e),
        }
    })
}

/// Releases a handle. Passing null is a no-op.
///
/// # Safety
/// `handle` must come from `helix_load_checkpoint` and must not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn helix_free(handle: *mut HelixHandle) {
    if !handle.is_null() {
        drop(unsafe { Box::from_raw(handle) });
    }
}
