//! C ABI for the cdef library: load trained models, run inference, and
//! craft PGD adversarial examples from other languages.
//!
//! Conventions:
//! - Models are opaque handles created by `cdef_model_*` constructors and
//!   released with `cdef_model_free`.
//! - Fallible calls return a `CdefStatus`; on anything but `CDEF_STATUS_OK`
//!   a human-readable message is available via `cdef_last_error`.
//! - Buffers are caller-allocated; lengths are always passed explicitly.

use cdef_core::attacks::{pgd_targeted, AttackBudget};
use cdef_core::model::Model;
use cdef_core::Tensor;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CdefStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// An argument failed validation (bad length, class out of range, ...).
    InvalidArgument = 2,
    /// A string argument was not valid UTF-8.
    Utf8 = 3,
    /// File could not be read.
    Io = 4,
    /// The underlying computation failed; see `cdef_last_error`.
    Runtime = 5,
}

/// Opaque handle to a loaded model.
pub struct CdefModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(status: CdefStatus, msg: &str) -> CdefStatus {
    set_error(msg);
    status
}

fn classify(err: &cdef_core::Error) -> CdefStatus {
    match err {
        cdef_core::Error::Io { .. } => CdefStatus::Io,
        cdef_core::Error::LabelOutOfRange { .. }
        | cdef_core::Error::ShapeMismatch { .. }
        | cdef_core::Error::InputOutOfRange { .. }
        | cdef_core::Error::InvalidConfig { .. } => CdefStatus::InvalidArgument,
        _ => CdefStatus::Runtime,
    }
}

fn fail_with(err: cdef_core::Error) -> CdefStatus {
    let status = classify(&err);
    set_error(&err.to_string());
    status
}

/// Copies the last error message for this thread into `buf` (truncated,
/// always NUL-terminated when `cap > 0`) and returns the full message
/// length in bytes, excluding the terminator.
///
/// # Safety
/// `buf` must point to at least `cap` writable bytes, or be null.
#[no_mangle]
pub unsafe extern "C" fn cdef_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cdef_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

unsafe fn model_from_json_impl(json: *const c_char, out: *mut *mut CdefModel) -> CdefStatus {
    if json.is_null() || out.is_null() {
        return fail(CdefStatus::NullArgument, "json and out must be non-null");
    }
    let text = match CStr::from_ptr(json).to_str() {
        Ok(t) => t,
        Err(_) => return fail(CdefStatus::Utf8, "model JSON is not valid UTF-8"),
    };
    match Model::from_json(text) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(CdefModel { inner }));
            CdefStatus::Ok
        }
        Err(e) => fail_with(e),
    }
}

/// Parses a model from its JSON serialization.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cdef_model_from_json(
    json: *const c_char,
    out: *mut *mut CdefModel,
) -> CdefStatus {
    model_from_json_impl(json, out)
}

/// Loads a model from a JSON file on disk.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cdef_model_load(
    path: *const c_char,
    out: *mut *mut CdefModel,
) -> CdefStatus {
    if path.is_null() || out.is_null() {
        return fail(CdefStatus::NullArgument, "path and out must be non-null");
    }
    let path = match CStr::from_ptr(path).to_str() {
        Ok(p) => p,
        Err(_) => return fail(CdefStatus::Utf8, "path is not valid UTF-8"),
    };
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => return fail(CdefStatus::Io, &format!("{path}: {e}")),
    };
    match Model::from_json(&text) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(CdefModel { inner }));
            CdefStatus::Ok
        }
        Err(e) => fail_with(e),
    }
}

/// Releases a model handle. Null is a no-op.
///
/// # Safety
/// `model` must be a pointer previously returned by a constructor, and
/// must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cdef_model_free(model: *mut CdefModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input dimension of the model, or 0 if `model` is null.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn cdef_model_input_dim(model: *const CdefModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.input_dim())
}

/// Number of classes, or 0 if `model` is null.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn cdef_model_n_classes(model: *const CdefModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.n_classes())
}

unsafe fn input_tensor(model: &Model, x: *const f64, len: usize) -> Result<Tensor, CdefStatus> {
    if x.is_null() {
        return Err(fail(CdefStatus::NullArgument, "x must be non-null"));
    }
    if len != model.input_dim() {
        return Err(fail(
            CdefStatus::InvalidArgument,
            &format!("len {} != model input dim {}", len, model.input_dim()),
        ));
    }
    let data = std::slice::from_raw_parts(x, len).to_vec();
    Tensor::vector(data).map_err(|e| fail_with(e))
}

/// Predicted class for the feature vector `x` of length `len`.
///
/// # Safety
/// `x` must point to `len` readable doubles; `out_class` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cdef_model_predict(
    model: *const CdefModel,
    x: *const f64,
    len: usize,
    out_class: *mut usize,
) -> CdefStatus {
    let Some(model) = model.as_ref() else {
        return fail(CdefStatus::NullArgument, "model must be non-null");
    };
    if out_class.is_null() {
        return fail(CdefStatus::NullArgument, "out_class must be non-null");
    }
    let t = match input_tensor(&model.inner, x, len) {
        Ok(t) => t,
        Err(s) => return s,
    };
    match model.inner.predict(&t) {
        Ok(c) => {
            *out_class = c;
            CdefStatus::Ok
        }
        Err(e) => fail_with(e),
    }
}

/// Class probabilities for `x`; `out_probs` must hold `n_classes` doubles.
///
/// # Safety
/// `x` must point to `len` readable doubles; `out_probs` must point to
/// `out_cap` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn cdef_model_probs(
    model: *const CdefModel,
    x: *const f64,
    len: usize,
    out_probs: *mut f64,
    out_cap: usize,
) -> CdefStatus {
    let Some(model) = model.as_ref() else {
        return fail(CdefStatus::NullArgument, "model must be non-null");
    };
    if out_probs.is_null() {
        return fail(CdefStatus::NullArgument, "out_probs must be non-null");
    }
    if out_cap != model.inner.n_classes() {
        return fail(
            CdefStatus::InvalidArgument,
            &format!(
                "out_cap {} != n_classes {}",
                out_cap,
                model.inner.n_classes()
            ),
        );
    }
    let t = match input_tensor(&model.inner, x, len) {
        Ok(t) => t,
        Err(s) => return s,
    };
    match model.inner.forward(&t) {
        Ok(trace) => {
            std::ptr::copy_nonoverlapping(trace.probs.data().as_ptr(), out_probs, out_cap);
            CdefStatus::Ok
        }
        Err(e) => fail_with(e),
    }
}

/// Crafts a targeted PGD adversarial example from `x` toward `target`.
/// Writes the perturbed input to `x_adv` (`len` doubles), the model's
/// prediction on it to `out_predicted`, and whether the attack hit the
/// target to `out_success` (any of the three may be null to skip it).
///
/// # Safety
/// `x` must point to `len` readable doubles; non-null output pointers must
/// be writable (`x_adv` for `len` doubles).
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn cdef_attack_pgd(
    model: *const CdefModel,
    x: *const f64,
    len: usize,
    target: usize,
    epsilon: f64,
    alpha: f64,
    steps: usize,
    random_start: bool,
    seed: u64,
    x_adv: *mut f64,
    out_predicted: *mut usize,
    out_success: *mut bool,
) -> CdefStatus {
    let Some(model) = model.as_ref() else {
        return fail(CdefStatus::NullArgument, "model must be non-null");
    };
    let t = match input_tensor(&model.inner, x, len) {
        Ok(t) => t,
        Err(s) => return s,
    };
    let budget = AttackBudget {
        epsilon,
        alpha,
        steps,
        random_start,
    };
    match pgd_targeted(&model.inner, &t, target, &budget, seed) {
        Ok(result) => {
            if !x_adv.is_null() {
                std::ptr::copy_nonoverlapping(result.x_adv.data().as_ptr(), x_adv, len);
            }
            if !out_predicted.is_null() {
                *out_predicted = result.predicted;
            }
            if !out_success.is_null() {
                *out_success = result.success;
            }
            CdefStatus::Ok
        }
        Err(e) => fail_with(e),
    }
}
