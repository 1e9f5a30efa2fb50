//! C ABI over checkpoint loading, single-stream inference and CER.
//!
//! Every function returns an [`OlhtrStatus`]; on failure a message is kept
//! per thread and can be read with [`olhtr_last_error`]. Strings handed out
//! by the library must be released with [`olhtr_string_free`], models with
//! [`olhtr_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use olhtr::data::{Point, TrajectorySequence};
use olhtr::training::{load_checkpoint, CheckpointError, ModelState};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OlhtrStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    BadCheckpoint = 4,
    BadInput = 5,
    Inference = 6,
    Panic = 7,
}

/// Opaque handle to a loaded model.
pub struct OlhtrModel {
    state: ModelState,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn fail(status: OlhtrStatus, msg: impl Into<String>) -> OlhtrStatus {
    set_error(msg);
    status
}

/// Runs `f`, mapping a panic to [`OlhtrStatus::Panic`].
fn guard(f: impl FnOnce() -> OlhtrStatus) -> OlhtrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            fail(OlhtrStatus::Panic, msg)
        }
    }
}

unsafe fn str_arg<'a>(s: *const c_char, what: &str) -> Result<&'a str, OlhtrStatus> {
    if s.is_null() {
        return Err(fail(OlhtrStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| fail(OlhtrStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

/// Loads a checkpoint file into `*out`. `*out` is left untouched on failure.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn olhtr_model_load(
    path: *const c_char,
    out: *mut *mut OlhtrModel,
) -> OlhtrStatus {
    guard(|| {
        let path = match str_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        if out.is_null() {
            return fail(OlhtrStatus::NullArgument, "out is null");
        }
        match load_checkpoint(Path::new(path)) {
            Ok(state) => {
                *out = Box::into_raw(Box::new(OlhtrModel { state }));
                OlhtrStatus::Ok
            }
            Err(e @ CheckpointError::Io { .. }) => fail(OlhtrStatus::Io, e.to_string()),
            Err(e) => fail(OlhtrStatus::BadCheckpoint, e.to_string()),
        }
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`olhtr_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn olhtr_model_free(model: *mut OlhtrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of output symbols of the model, excluding reserved tokens.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn olhtr_model_num_symbols(
    model: *const OlhtrModel,
    out: *mut usize,
) -> OlhtrStatus {
    if model.is_null() || out.is_null() {
        return fail(OlhtrStatus::NullArgument, "model or out is null");
    }
    *out = (*model).state.vocab.symbols().len();
    OlhtrStatus::Ok
}

/// Transcribes `n_points` pen samples laid out as `x, y, pen_down` triples
/// (`pen_down` is 0 or 1). The UTF-8 result goes to `*out_text`.
///
/// # Safety
/// `model` must be a live handle, `points` must hold `3 * n_points` doubles
/// and `out_text` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn olhtr_infer(
    model: *const OlhtrModel,
    points: *const f64,
    n_points: usize,
    out_text: *mut *mut c_char,
) -> OlhtrStatus {
    guard(|| {
        if model.is_null() || points.is_null() || out_text.is_null() {
            return fail(
                OlhtrStatus::NullArgument,
                "model, points or out_text is null",
            );
        }
        let Some(len) = n_points.checked_mul(3) else {
            return fail(OlhtrStatus::BadInput, "point count overflows");
        };
        let raw = std::slice::from_raw_parts(points, len);
        let mut pts = Vec::with_capacity(n_points);
        for (i, p) in raw.chunks_exact(3).enumerate() {
            let down = match p[2] {
                1.0 => true,
                0.0 => false,
                s => {
                    return fail(
                        OlhtrStatus::BadInput,
                        format!("point {i}: pen state {s} is not 0 or 1"),
                    )
                }
            };
            pts.push(Point::new(p[0], p[1], down));
        }
        let seq = TrajectorySequence::new("ffi", pts, "");
        if let Err(e) = seq.validate() {
            return fail(OlhtrStatus::BadInput, e.to_string());
        }
        match (*model).state.infer(&seq) {
            Ok(text) => {
                *out_text = CString::new(text)
                    .expect("transcripts hold no NUL")
                    .into_raw();
                OlhtrStatus::Ok
            }
            Err(e) => fail(OlhtrStatus::Inference, e.to_string()),
        }
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn olhtr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Character error rate of one hypothesis against one reference.
///
/// # Safety
/// Both strings must be NUL-terminated and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn olhtr_cer(
    reference: *const c_char,
    hypothesis: *const c_char,
    out: *mut f64,
) -> OlhtrStatus {
    guard(|| {
        let (r, h) = match (
            str_arg(reference, "reference"),
            str_arg(hypothesis, "hypothesis"),
        ) {
            (Ok(r), Ok(h)) => (r, h),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        if out.is_null() {
            return fail(OlhtrStatus::NullArgument, "out is null");
        }
        match olhtr::metrics::cer(&[r], &[h]) {
            Ok(v) => {
                *out = v;
                OlhtrStatus::Ok
            }
            Err(e) => fail(OlhtrStatus::BadInput, e.to_string()),
        }
    })
}

/// Message of the last failure on this thread; empty if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn olhtr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn olhtr_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}
