//! C ABI over `mmcaps`.
//!
//! Models are opaque [`MmcapsModel`] handles created by a constructor and
//! released with [`mmcaps_model_free`]. Every fallible call returns an
//! [`MmcapsStatus`]; on failure [`mmcaps_last_error_message`] describes the
//! most recent error on the calling thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use mmcaps::eval::{retrieval_metrics, Metric, DEFAULT_KS};
use mmcaps::loss::mms_pair_loss;
use mmcaps::model::{Modality, Model, ModelConfig};
use mmcaps::{Error, Tensor2D};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MmcapsStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// A configuration or argument value is invalid.
    InvalidArgument = 2,
    /// Array sizes do not match the model or each other.
    ShapeMismatch = 3,
    /// A file or buffer is malformed.
    Format = 4,
    Io = 5,
    /// Any other failure inside the library.
    Runtime = 6,
    /// The library panicked; the handle involved should be freed.
    Panic = 7,
}

/// Opaque model handle.
pub struct MmcapsModel {
    model: Model,
}

/// Retrieval summary: recall at 1, 5 and 10 and the median rank.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MmcapsRetrieval {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub medr: f64,
}

/// Modality codes accepted by [`mmcaps_model_embed`].
pub const MMCAPS_MODALITY_VIDEO: u32 = 0;
pub const MMCAPS_MODALITY_AUDIO: u32 = 1;
pub const MMCAPS_MODALITY_TEXT: u32 = 2;

/// Metric codes accepted by [`mmcaps_retrieval_metrics`].
pub const MMCAPS_METRIC_EUCLIDEAN: u32 = 0;
pub const MMCAPS_METRIC_DOT: u32 = 1;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let clean = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = clean);
}

fn status_of(e: &Error) -> MmcapsStatus {
    match e {
        Error::Config { .. } | Error::Range(_) | Error::Empty(_) | Error::InvalidSegment { .. } => {
            MmcapsStatus::InvalidArgument
        }
        Error::Shape { .. } | Error::InvalidShape(_) => MmcapsStatus::ShapeMismatch,
        Error::Format(_) | Error::Json(_) => MmcapsStatus::Format,
        Error::Io(_) => MmcapsStatus::Io,
        _ => MmcapsStatus::Runtime,
    }
}

/// Runs `f`, recording any error or panic.
fn guard(f: impl FnOnce() -> Result<(), (MmcapsStatus, String)>) -> MmcapsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MmcapsStatus::Ok,
        Ok(Err((status, message))) => {
            set_error(&message);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| (*s).to_owned())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_owned());
            set_error(&format!("panic: {msg}"));
            MmcapsStatus::Panic
        }
    }
}

fn lib(e: Error) -> (MmcapsStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (MmcapsStatus, String) {
    (MmcapsStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: String) -> (MmcapsStatus, String) {
    (MmcapsStatus::InvalidArgument, msg)
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (MmcapsStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn matrix_arg(p: *const f64, rows: usize, cols: usize, what: &str) -> Result<Tensor2D, (MmcapsStatus, String)> {
    let len = rows.checked_mul(cols).ok_or_else(|| invalid(format!("{what}: {rows}×{cols} overflows")))?;
    if p.is_null() {
        if len == 0 {
            return Tensor2D::from_vec(rows, cols, Vec::new()).map_err(lib);
        }
        return Err(null(what));
    }
    Tensor2D::from_vec(rows, cols, std::slice::from_raw_parts(p, len).to_vec()).map_err(lib)
}

fn modality(code: u32) -> Result<Modality, (MmcapsStatus, String)> {
    match code {
        MMCAPS_MODALITY_VIDEO => Ok(Modality::Video),
        MMCAPS_MODALITY_AUDIO => Ok(Modality::Audio),
        MMCAPS_MODALITY_TEXT => Ok(Modality::Text),
        _ => Err(invalid(format!("unknown modality code {code}"))),
    }
}

unsafe fn publish(out: *mut *mut MmcapsModel, model: Model) {
    *out = Box::into_raw(Box::new(MmcapsModel { model }));
}

/// Message for the last failed call on this thread, or an empty string.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mmcaps_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Builds a freshly initialized model from a JSON model configuration.
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn mmcaps_model_new_from_json(
    config_json: *const c_char,
    seed: u64,
    out: *mut *mut MmcapsModel,
) -> MmcapsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let text = str_arg(config_json, "config_json")?;
        let config: ModelConfig =
            serde_json::from_str(text).map_err(|e| invalid(format!("model config: {e}")))?;
        publish(out, Model::new(config, seed).map_err(lib)?);
        Ok(())
    })
}

/// Loads the model stored in a training checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn mmcaps_model_load_checkpoint(path: *const c_char, out: *mut *mut MmcapsModel) -> MmcapsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        publish(out, mmcaps::train::load_model(Path::new(path)).map_err(lib)?);
        Ok(())
    })
}

/// Embeds `rows` feature vectors of one modality into the joint space.
/// `features` is row-major `rows × cols`; `out` receives `rows × embed_dim`
/// values and `out_len` must equal that count.
///
/// # Safety
/// `model` must come from a constructor and not be freed; the arrays must
/// hold the stated number of `double`s.
#[no_mangle]
pub unsafe extern "C" fn mmcaps_model_embed(
    model: *const MmcapsModel,
    modality_code: u32,
    features: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
    out_len: usize,
) -> MmcapsStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let m = modality(modality_code)?;
        let x = matrix_arg(features, rows, cols, "features")?;
        let want = rows * model.model.config().embed_dim;
        if out_len != want {
            return Err((MmcapsStatus::ShapeMismatch, format!("out_len is {out_len}, expected {want}")));
        }
        let e = model.model.embed(&x, m).map_err(lib)?;
        if want > 0 {
            if out.is_null() {
                return Err(null("out"));
            }
            std::slice::from_raw_parts_mut(out, want).copy_from_slice(e.data());
        }
        Ok(())
    })
}

/// Joint embedding width `D`, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mmcaps_model_embed_dim(model: *const MmcapsModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config().embed_dim)
}

/// Expected feature width for a modality, or 0 for a null handle or bad code.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mmcaps_model_input_dim(model: *const MmcapsModel, modality_code: u32) -> usize {
    match (model.as_ref(), modality(modality_code)) {
        (Some(m), Ok(md)) => m.model.config().input_dims.get(md),
        _ => 0,
    }
}

/// Number of trainable scalars, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mmcaps_model_param_count(model: *const MmcapsModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.params.scalar_count())
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mmcaps_model_free(model: *mut MmcapsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Retrieval of `gallery` row `i` by `query` row `i`, both `n × d`
/// row-major.
///
/// # Safety
/// The arrays must hold `n·d` doubles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmcaps_retrieval_metrics(
    query: *const f64,
    gallery: *const f64,
    n: usize,
    d: usize,
    metric: u32,
    out: *mut MmcapsRetrieval,
) -> MmcapsStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let metric = match metric {
            MMCAPS_METRIC_EUCLIDEAN => Metric::Euclidean,
            MMCAPS_METRIC_DOT => Metric::Dot,
            other => return Err(invalid(format!("unknown metric code {other}"))),
        };
        let q = matrix_arg(query, n, d, "query")?;
        let g = matrix_arg(gallery, n, d, "gallery")?;
        let r = retrieval_metrics(&q, &g, &DEFAULT_KS, metric).map_err(lib)?;
        *out = MmcapsRetrieval {
            r1: r.r_at[&1],
            r5: r.r_at[&5],
            r10: r.r_at[&10],
            medr: r.med_r,
        };
        Ok(())
    })
}

/// Symmetric contrastive loss of an `n × n` similarity matrix whose
/// diagonal holds the matching pairs.
///
/// # Safety
/// `similarity` must hold `n·n` doubles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmcaps_mms_pair_loss(similarity: *const f64, n: usize, delta: f64, out: *mut f64) -> MmcapsStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let s = matrix_arg(similarity, n, n, "similarity")?;
        *out = mms_pair_loss(&s, delta).map_err(lib)?;
        Ok(())
    })
}
