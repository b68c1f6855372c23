//! C ABI for loading trained checkpoints, embedding protein sequences and
//! computing the evaluation metrics.
//!
//! Every fallible function returns a [`KeapStatus`]. On failure a message is
//! stored per thread and can be read with [`keap_last_error`]. Models are
//! exposed as opaque [`KeapModel`] handles that must be released with
//! [`keap_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use keap_core::eval::{self, ContactMap, EvalError, RangeBucket};
use keap_core::model::{embed_residues, ModelConfig, Parameters};
use keap_core::train::{load_checkpoint, CheckpointError};

/// Result codes shared by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeapStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    CorruptCheckpoint = 4,
    Undefined = 5,
    BufferTooSmall = 6,
    Internal = 7,
}

/// Range bucket selector for [`keap_precision_at_k`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeapRange {
    Short = 0,
    Medium = 1,
    Long = 2,
}

/// Opaque handle to a loaded model.
pub struct KeapModel {
    config: ModelConfig,
    params: Parameters<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(KeapStatus, String);

impl Failure {
    fn new(status: KeapStatus, msg: impl Into<String>) -> Self {
        Failure(status, msg.into())
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        let status = match e {
            EvalError::Undefined(_) => KeapStatus::Undefined,
            EvalError::Io { .. } => KeapStatus::Io,
            _ => KeapStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        let status = match e {
            CheckpointError::Io { .. } => KeapStatus::Io,
            _ => KeapStatus::CorruptCheckpoint,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> KeapStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
            KeapStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            KeapStatus::Internal
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure::new(KeapStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    non_null(p, what)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(KeapStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn write_out<T>(out: *mut T, value: T) -> Result<(), Failure> {
    non_null(out, "output pointer")?;
    *out = value;
    Ok(())
}

/// Message for the most recent failure on this thread, or null when the
/// last call succeeded. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn keap_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn keap_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint file and stores a new handle in `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn keap_model_load(path: *const c_char, out: *mut *mut KeapModel) -> KeapStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let path = c_str(path, "path")?;
        let ckpt = load_checkpoint(Path::new(path))?;
        let model = Box::new(KeapModel {
            config: ckpt.model_config,
            params: ckpt.state.params,
        });
        *out = Box::into_raw(model);
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`keap_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn keap_model_free(model: *mut KeapModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Hidden width, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn keap_model_hidden_dim(model: *const KeapModel) -> usize {
    model.as_ref().map_or(0, |m| m.config.hidden)
}

/// Longest protein the encoder accepts, excluding framing tokens.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn keap_model_max_protein_len(model: *const KeapModel) -> usize {
    model.as_ref().map_or(0, |m| m.config.limits.protein.saturating_sub(2))
}

/// Mean-pooled encoder representation of `sequence`, written to
/// `out[0..hidden]`.
///
/// # Safety
/// `model` must be live, `sequence` NUL-terminated and `out` must hold
/// `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn keap_model_embed(
    model: *const KeapModel,
    sequence: *const c_char,
    out: *mut f32,
    out_len: usize,
) -> KeapStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| Failure::new(KeapStatus::NullPointer, "model is null"))?;
        let seq = c_str(sequence, "sequence")?;
        non_null(out, "out")?;
        let d = m.config.hidden;
        if out_len < d {
            return Err(Failure::new(KeapStatus::BufferTooSmall, format!("need {d} floats, got {out_len}")));
        }
        let mean = eval::mean_embedding(&m.config, &m.params, &seq.to_ascii_uppercase())?;
        let dst = std::slice::from_raw_parts_mut(out, d);
        for (o, v) in dst.iter_mut().zip(mean) {
            *o = v as f32;
        }
        Ok(())
    })
}

/// Per-residue encoder states, row-major `[rows, hidden]`. `*rows` receives
/// the residue count. Passing a null `out` queries the row count only.
///
/// # Safety
/// `model` must be live, `sequence` NUL-terminated, `rows` writable and a
/// non-null `out` must hold `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn keap_model_embed_residues(
    model: *const KeapModel,
    sequence: *const c_char,
    out: *mut f32,
    out_len: usize,
    rows: *mut usize,
) -> KeapStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| Failure::new(KeapStatus::NullPointer, "model is null"))?;
        let seq = c_str(sequence, "sequence")?;
        non_null(rows, "rows")?;
        let states = embed_residues(&m.config, &m.params, &seq.to_ascii_uppercase())
            .map_err(|e| Failure::new(KeapStatus::InvalidArgument, e.to_string()))?;
        let data = states.data();
        *rows = data.len() / m.config.hidden;
        if out.is_null() {
            return Ok(());
        }
        if out_len < data.len() {
            let need = data.len();
            return Err(Failure::new(KeapStatus::BufferTooSmall, format!("need {need} floats, got {out_len}")));
        }
        std::slice::from_raw_parts_mut(out, data.len()).copy_from_slice(data);
        Ok(())
    })
}

/// Top-`L/divisor` contact precision over one range bucket. `truth` and
/// `probs` are row-major `len x len`; only `i < j` entries are read.
///
/// # Safety
/// `truth` and `probs` must hold `len * len` elements and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn keap_precision_at_k(
    len: usize,
    truth: *const u8,
    probs: *const f64,
    range: KeapRange,
    divisor: usize,
    out: *mut f64,
) -> KeapStatus {
    guard(|| {
        let n = len
            .checked_mul(len)
            .ok_or_else(|| Failure::new(KeapStatus::InvalidArgument, "len overflows"))?;
        let truth = slice(truth, n, "truth")?.iter().map(|&t| t != 0).collect();
        let probs = slice(probs, n, "probs")?.to_vec();
        let map = ContactMap::new(len, truth, probs)?;
        let bucket = match range {
            KeapRange::Short => RangeBucket::Short,
            KeapRange::Medium => RangeBucket::Medium,
            KeapRange::Long => RangeBucket::Long,
        };
        write_out(out, eval::precision_at_k(&map, bucket, divisor)?)
    })
}

/// Spearman rank correlation with average ranks for ties.
///
/// # Safety
/// `x` and `y` must hold `n` elements and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn keap_spearman(x: *const f64, y: *const f64, n: usize, out: *mut f64) -> KeapStatus {
    guard(|| write_out(out, eval::spearman(slice(x, n, "x")?, slice(y, n, "y")?)?))
}

/// Mean squared error.
///
/// # Safety
/// `pred` and `truth` must hold `n` elements and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn keap_mse(pred: *const f64, truth: *const f64, n: usize, out: *mut f64) -> KeapStatus {
    guard(|| write_out(out, eval::mse(slice(pred, n, "pred")?, slice(truth, n, "truth")?)?))
}

/// `1 - |u - v|_1 / normalizer`.
///
/// # Safety
/// `u` and `v` must hold `n` elements and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn keap_manhattan_similarity(
    u: *const f64,
    v: *const f64,
    n: usize,
    normalizer: f64,
    out: *mut f64,
) -> KeapStatus {
    guard(|| write_out(out, eval::manhattan_similarity(slice(u, n, "u")?, slice(v, n, "v")?, normalizer)?))
}

/// Multi-label F1 over `rows x cols` row-major 0/1 matrices. `macro_avg`
/// selects per-label averaging instead of pooled counts.
///
/// # Safety
/// `pred` and `truth` must hold `rows * cols` bytes and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn keap_multilabel_f1(
    pred: *const u8,
    truth: *const u8,
    rows: usize,
    cols: usize,
    macro_avg: bool,
    out: *mut f64,
) -> KeapStatus {
    guard(|| {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Failure::new(KeapStatus::InvalidArgument, "rows * cols overflows"))?;
        let to_rows = |s: &[u8]| -> Vec<Vec<bool>> {
            if cols == 0 {
                return vec![Vec::new(); rows];
            }
            s.chunks(cols).map(|r| r.iter().map(|&b| b != 0).collect()).collect()
        };
        let p = to_rows(slice(pred, n, "pred")?);
        let t = to_rows(slice(truth, n, "truth")?);
        let avg = if macro_avg { eval::F1Average::Macro } else { eval::F1Average::Micro };
        write_out(out, eval::multilabel_f1(&p, &t, avg)?)
    })
}
