//! C ABI over `ctsr`.
//!
//! Conventions:
//! * every fallible call returns a `CtsrStatus`; `CTSR_OK` is 0
//! * on failure a message is kept per thread and read with
//!   `ctsr_last_error_message`
//! * models and indexes are opaque handles released with their `_free`
//! * panics never cross the boundary; they surface as `CTSR_ERR_PANIC`

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ctsr::distance::{dtw_distance, euclidean_distance};
use ctsr::index::{FeatureIndex, QueryResult};
use ctsr::models::{Model, ModelKind, EMBED_DIM};
use ctsr::training::CheckpointRecord;
use ctsr::ts_core::{Preprocess, TimeSeries};
use ctsr::Error;

/// Length of every embedding written by `ctsr_model_embed`.
pub const CTSR_EMBED_DIM: usize = 64;
const _: () = assert!(CTSR_EMBED_DIM == EMBED_DIM);

#[repr(C)]
#[allow(non_camel_case_types)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtsrStatus {
    CTSR_OK = 0,
    CTSR_ERR_NULL = 1,
    CTSR_ERR_UTF8 = 2,
    CTSR_ERR_IO = 3,
    CTSR_ERR_PARSE = 4,
    CTSR_ERR_FORMAT = 5,
    CTSR_ERR_DIMENSION = 6,
    CTSR_ERR_PARAMETER = 7,
    CTSR_ERR_MODEL_KIND = 8,
    CTSR_ERR_STATE = 9,
    CTSR_ERR_OTHER = 10,
    CTSR_ERR_PANIC = 11,
}

use CtsrStatus::*;

#[repr(C)]
#[allow(non_camel_case_types)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtsrModelKind {
    CTSR_MODEL_RN2DWT = 0,
    CTSR_MODEL_RN2D = 1,
    CTSR_MODEL_RN1D = 2,
}

/// A loaded checkpoint.
pub struct CtsrModel {
    model: Model,
    hash: String,
}

/// A loaded feature index. Item ids and labels are kept as C strings so
/// borrowed pointers stay valid for the handle's lifetime.
pub struct CtsrIndex {
    index: FeatureIndex,
    ids: Vec<CString>,
    labels: Vec<CString>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CtsrStatus {
    match e {
        Error::Io { .. } => CTSR_ERR_IO,
        Error::Parse { .. } | Error::EmptyInput(_) => CTSR_ERR_PARSE,
        Error::Format(_) => CTSR_ERR_FORMAT,
        Error::Dimension(_) => CTSR_ERR_DIMENSION,
        Error::Parameter(_) => CTSR_ERR_PARAMETER,
        Error::ModelKind(_) => CTSR_ERR_MODEL_KIND,
        Error::State(_) => CTSR_ERR_STATE,
        _ => CTSR_ERR_OTHER,
    }
}

struct Fail(CtsrStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(CTSR_ERR_NULL, format!("{what} is null"))
}

/// Runs `f`, recording its error message and mapping panics.
fn guard<F: FnOnce() -> Result<(), Fail>>(f: F) -> CtsrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CTSR_OK
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            CTSR_ERR_PANIC
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn path<'a>(p: *const c_char) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(CTSR_ERR_UTF8, "path is not valid UTF-8".into()))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ctsr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL after a
/// success. Valid until the next ctsr call on the same thread.
#[no_mangle]
pub extern "C" fn ctsr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Unconstrained DTW distance with |a_i - b_j| local cost.
///
/// # Safety
/// `a` and `b` must point to `na` and `nb` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ctsr_dtw_distance(a: *const f64, na: usize, b: *const f64, nb: usize, out_d: *mut f64) -> CtsrStatus {
    guard(|| {
        let d = dtw_distance(slice(a, na, "a")?, slice(b, nb, "b")?)?;
        *out(out_d, "out")? = d;
        Ok(())
    })
}

/// Euclidean distance of two equal-length series.
///
/// # Safety
/// As for `ctsr_dtw_distance`.
#[no_mangle]
pub unsafe extern "C" fn ctsr_euclidean_distance(
    a: *const f64,
    na: usize,
    b: *const f64,
    nb: usize,
    out_d: *mut f64,
) -> CtsrStatus {
    guard(|| {
        let d = euclidean_distance(slice(a, na, "a")?, slice(b, nb, "b")?)?;
        *out(out_d, "out")? = d;
        Ok(())
    })
}

/// Loads a `CTSR` checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ctsr_model_load(p: *const c_char, out_model: *mut *mut CtsrModel) -> CtsrStatus {
    guard(|| {
        let slot = out(out_model, "out_model")?;
        *slot = ptr::null_mut();
        let rec = CheckpointRecord::load(path(p)?)?;
        let hash = rec.hash()?;
        let model = rec.model()?;
        *slot = Box::into_raw(Box::new(CtsrModel { model, hash }));
        Ok(())
    })
}

/// Releases a model; NULL is ignored.
///
/// # Safety
/// `model` must come from `ctsr_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ctsr_model_free(model: *mut CtsrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `out_kind` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ctsr_model_kind(model: *const CtsrModel, out_kind: *mut CtsrModelKind) -> CtsrStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out(out_kind, "out_kind")? = match m.model.kind() {
            ModelKind::Rn2dwt => CtsrModelKind::CTSR_MODEL_RN2DWT,
            ModelKind::Rn2d => CtsrModelKind::CTSR_MODEL_RN2D,
            ModelKind::Rn1d => CtsrModelKind::CTSR_MODEL_RN1D,
        };
        Ok(())
    })
}

/// Series length the model was trained on.
///
/// # Safety
/// `model` must be a live handle; `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ctsr_model_series_length(model: *const CtsrModel, out_len: *mut usize) -> CtsrStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out(out_len, "out_len")? = m.model.config().series_length;
        Ok(())
    })
}

fn prepare(m: &CtsrModel, values: &[f64], znorm: bool) -> Result<Vec<f64>, Fail> {
    let s = TimeSeries::new("query", values.to_vec(), None)?;
    let prep = Preprocess {
        length: m.model.config().series_length,
        znorm,
    };
    Ok(prep.apply(&s)?.values().to_vec())
}

/// Embeds one series into `CTSR_EMBED_DIM` floats. The series is resampled
/// to the model length and, when `znorm` is nonzero, z-normalized first.
///
/// # Safety
/// `values` must hold `n` doubles and `out_embedding` `CTSR_EMBED_DIM` floats.
#[no_mangle]
pub unsafe extern "C" fn ctsr_model_embed(
    model: *const CtsrModel,
    values: *const f64,
    n: usize,
    znorm: i32,
    out_embedding: *mut f32,
) -> CtsrStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let v = prepare(m, slice(values, n, "values")?, znorm != 0)?;
        if out_embedding.is_null() {
            return Err(null("out_embedding"));
        }
        let e = m.model.embed(&v)?;
        std::slice::from_raw_parts_mut(out_embedding, EMBED_DIM).copy_from_slice(&e.0);
        Ok(())
    })
}

/// Loads a `CTSX` index.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_index` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ctsr_index_load(p: *const c_char, out_index: *mut *mut CtsrIndex) -> CtsrStatus {
    guard(|| {
        let slot = out(out_index, "out_index")?;
        *slot = ptr::null_mut();
        let index = FeatureIndex::load(path(p)?)?;
        let cstr = |s: &String| CString::new(s.as_str()).map_err(|_| Fail(CTSR_ERR_FORMAT, "NUL inside an id or label".into()));
        let ids = index.ids().iter().map(cstr).collect::<Result<_, _>>()?;
        let labels = index.labels().iter().map(cstr).collect::<Result<_, _>>()?;
        *slot = Box::into_raw(Box::new(CtsrIndex { index, ids, labels }));
        Ok(())
    })
}

/// Releases an index; NULL is ignored.
///
/// # Safety
/// `index` must come from `ctsr_index_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ctsr_index_free(index: *mut CtsrIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// Number of indexed items, 0 for NULL.
///
/// # Safety
/// `index` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ctsr_index_len(index: *const CtsrIndex) -> usize {
    index.as_ref().map_or(0, |i| i.index.len())
}

/// Id of item `pos`, borrowed from the index; NULL when out of range.
///
/// # Safety
/// `index` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ctsr_index_item_id(index: *const CtsrIndex, pos: usize) -> *const c_char {
    index
        .as_ref()
        .and_then(|i| i.ids.get(pos))
        .map_or(ptr::null(), |c| c.as_ptr())
}

/// Label of item `pos`, borrowed from the index; NULL when out of range.
///
/// # Safety
/// `index` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ctsr_index_item_label(index: *const CtsrIndex, pos: usize) -> *const c_char {
    index
        .as_ref()
        .and_then(|i| i.labels.get(pos))
        .map_or(ptr::null(), |c| c.as_ptr())
}

unsafe fn run_query<F>(
    index: *const CtsrIndex,
    model: *const CtsrModel,
    values: *const f64,
    n: usize,
    znorm: i32,
    k: usize,
    out_positions: *mut usize,
    out_scores: *mut f64,
    out_count: *mut usize,
    search: F,
) -> CtsrStatus
where
    F: FnOnce(&FeatureIndex, &Model, &[f64], usize) -> ctsr::Result<QueryResult>,
{
    guard(|| {
        let idx = index.as_ref().ok_or_else(|| null("index"))?;
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let count = out(out_count, "out_count")?;
        *count = 0;
        if idx.index.checkpoint_hash() != m.hash {
            return Err(Fail(
                CTSR_ERR_STATE,
                format!(
                    "index was built from checkpoint {}, model is {}",
                    idx.index.checkpoint_hash(),
                    m.hash
                ),
            ));
        }
        if out_positions.is_null() || out_scores.is_null() {
            return Err(null("output buffer"));
        }
        let q = prepare(m, slice(values, n, "values")?, znorm != 0)?;
        let r = search(&idx.index, &m.model, &q, k)?;
        let pos = std::slice::from_raw_parts_mut(out_positions, k);
        let sc = std::slice::from_raw_parts_mut(out_scores, k);
        for (i, h) in r.hits.iter().enumerate() {
            pos[i] = h.position;
            sc[i] = h.score;
        }
        *count = r.hits.len();
        Ok(())
    })
}

/// Exact top-`k`: positions and scores (negated embedding distance) in rank
/// order; `*out_count` receives min(k, n).
///
/// # Safety
/// `values` must hold `n` doubles; `out_positions` and `out_scores` must
/// hold `k` elements each.
#[no_mangle]
pub unsafe extern "C" fn ctsr_index_query_exact(
    index: *const CtsrIndex,
    model: *const CtsrModel,
    values: *const f64,
    n: usize,
    znorm: i32,
    k: usize,
    out_positions: *mut usize,
    out_scores: *mut f64,
    out_count: *mut usize,
) -> CtsrStatus {
    run_query(index, model, values, n, znorm, k, out_positions, out_scores, out_count, |idx, m, q, k| {
        idx.query_exact(m, q, k)
    })
}

/// Graph-guided top-`k` with a pool of `candidates`; the index must carry
/// a k-NN graph.
///
/// # Safety
/// As for `ctsr_index_query_exact`.
#[no_mangle]
pub unsafe extern "C" fn ctsr_index_query_ann(
    index: *const CtsrIndex,
    model: *const CtsrModel,
    values: *const f64,
    n: usize,
    znorm: i32,
    k: usize,
    candidates: usize,
    seed: u64,
    out_positions: *mut usize,
    out_scores: *mut f64,
    out_count: *mut usize,
) -> CtsrStatus {
    run_query(index, model, values, n, znorm, k, out_positions, out_scores, out_count, |idx, m, q, k| {
        let e = m.embed(q)?;
        idx.query_ann(&e, k.min(idx.len()), candidates, seed)
    })
}
