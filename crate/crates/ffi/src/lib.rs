//! C ABI over `robust-rules`.
//!
//! Objects cross the boundary as opaque handles created by the
//! `rr_*_from_*` constructors or `rr_train`, and released by the matching
//! `rr_*_free`. Every fallible call
//! returns an [`RrStatus`]; on failure the message is available from
//! [`rr_last_error_message`] on the same thread. Strings handed out by the
//! library are released with [`rr_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use robust_rules::{CausalGraph, Dataset, Error, RuleEnsemble, TrainConfig};

/// Status code returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Config = 4,
    Io = 5,
    InvalidData = 6,
    InvalidGraph = 7,
    NoSearchableRule = 8,
    Panic = 9,
}

/// Opaque dataset handle.
pub struct RrDataset(Dataset);

/// Opaque trained-model handle.
pub struct RrModel(RuleEnsemble);

/// Opaque causal-graph handle.
pub struct RrGraph(CausalGraph);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> RrStatus {
    match err {
        Error::Io(_) => RrStatus::Io,
        Error::Csv(e) if e.is_io_error() => RrStatus::Io,
        Error::Config(_) | Error::Contract(_) => RrStatus::Config,
        Error::InvalidGraph(_) | Error::UnknownNode(_) => RrStatus::InvalidGraph,
        Error::NoSearchableRule => RrStatus::NoSearchableRule,
        _ => RrStatus::InvalidData,
    }
}

struct Fail(RrStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> RrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RrStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            RrStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(RrStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(RrStatus::InvalidUtf8, format!("`{what}` is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    let c = CString::new(s).map_err(|_| Fail(RrStatus::InvalidData, "string contains NUL".into()))?;
    *out = c.into_raw();
    Ok(())
}

/// Message of the last failed call on this thread, or null if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must be null or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn rr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a CSV file with feature columns, a `y` column and optional `env`
/// and `group_id` columns.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rr_dataset_from_csv(path: *const c_char, out: *mut *mut RrDataset) -> RrStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        put(out, RrDataset(Dataset::read_csv_path(path)?))
    })
}

/// Builds a dataset from a row-major `n_rows x n_cols` matrix and 0/1 labels.
///
/// # Safety
/// `values` must hold `n_rows * n_cols` doubles and `labels` `n_rows` bytes.
#[no_mangle]
pub unsafe extern "C" fn rr_dataset_from_rows(
    values: *const f64,
    n_rows: usize,
    n_cols: usize,
    labels: *const u8,
    out: *mut *mut RrDataset,
) -> RrStatus {
    guard(|| {
        if n_rows == 0 || n_cols == 0 {
            return Err(Fail(RrStatus::InvalidArgument, "dataset must have at least one row and column".into()));
        }
        if values.is_null() {
            return Err(null("values"));
        }
        if labels.is_null() {
            return Err(null("labels"));
        }
        let len = n_rows.checked_mul(n_cols).ok_or_else(|| Fail(RrStatus::InvalidArgument, "size overflow".into()))?;
        let flat = std::slice::from_raw_parts(values, len);
        let rows: Vec<Vec<f64>> = flat.chunks(n_cols).map(<[f64]>::to_vec).collect();
        let labels = std::slice::from_raw_parts(labels, n_rows).to_vec();
        put(out, RrDataset(Dataset::from_rows(&rows, labels)?))
    })
}

/// # Safety
/// `data` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn rr_dataset_n_samples(data: *const RrDataset) -> usize {
    data.as_ref().map_or(0, |d| d.0.n_samples())
}

/// # Safety
/// `data` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn rr_dataset_n_features(data: *const RrDataset) -> usize {
    data.as_ref().map_or(0, |d| d.0.n_features())
}

/// # Safety
/// `data` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rr_dataset_free(data: *mut RrDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Parses a graph from its JSON form (`nodes`, `directed`, `bidirected`).
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rr_graph_from_json(json: *const c_char, out: *mut *mut RrGraph) -> RrStatus {
    guard(|| {
        let json = str_arg(json, "json")?;
        put(out, RrGraph(CausalGraph::from_json(json)?))
    })
}

/// Writes the invariant decomposition as JSON into `*out`; free it with
/// [`rr_string_free`].
///
/// # Safety
/// `graph` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rr_graph_decompose(graph: *const RrGraph, out: *mut *mut c_char) -> RrStatus {
    guard(|| {
        let g = ref_arg(graph, "graph")?;
        let d = g.0.decompose_invariant()?;
        let text = serde_json::to_string(&d).map_err(|e| Fail(RrStatus::InvalidData, e.to_string()))?;
        put_string(out, text)
    })
}

/// # Safety
/// `graph` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rr_graph_free(graph: *mut RrGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

/// Trains an ensemble. `config_json` may be null for defaults; `graph` is
/// required only for graph regularization.
///
/// # Safety
/// Pointers must be null or valid as documented; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rr_train(
    data: *const RrDataset,
    config_json: *const c_char,
    graph: *const RrGraph,
    out: *mut *mut RrModel,
) -> RrStatus {
    guard(|| {
        let data = ref_arg(data, "data")?;
        let config: TrainConfig = if config_json.is_null() {
            TrainConfig::default()
        } else {
            serde_json::from_str(str_arg(config_json, "config_json")?).map_err(|e| Fail(RrStatus::Config, e.to_string()))?
        };
        let decomposition = match graph.as_ref() {
            Some(g) => Some(g.0.decompose_invariant()?),
            None => None,
        };
        let model = robust_rules::train(&data.0, &config, decomposition.as_ref())?;
        put(out, RrModel(model))
    })
}

/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rr_model_from_json(json: *const c_char, out: *mut *mut RrModel) -> RrStatus {
    guard(|| {
        let json = str_arg(json, "json")?;
        put(out, RrModel(RuleEnsemble::from_json(json)?))
    })
}

/// Serializes the model; free the string with [`rr_string_free`].
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rr_model_to_json(model: *const RrModel, out: *mut *mut c_char) -> RrStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        put_string(out, m.0.to_json())
    })
}

/// Number of boosting terms.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rr_model_len(model: *const RrModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.len())
}

/// Ensemble score of one point of `len` features; its sign is the
/// predicted class.
///
/// # Safety
/// `point` must hold `len` doubles; `score` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rr_model_score(model: *const RrModel, point: *const f64, len: usize, score: *mut f64) -> RrStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        if point.is_null() {
            return Err(null("point"));
        }
        if score.is_null() {
            return Err(null("score"));
        }
        if len != m.0.feature_names.len() {
            return Err(Fail(RrStatus::InvalidArgument, format!("point has {len} values, model expects {}", m.0.feature_names.len())));
        }
        let p = std::slice::from_raw_parts(point, len);
        *score = m.0.predict(p)?.score;
        Ok(())
    })
}

/// Scores every row of `data` into `scores`, which must hold `len` slots
/// with `len` equal to the dataset's sample count.
///
/// # Safety
/// Handles must be live; `scores` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn rr_model_score_dataset(
    model: *const RrModel,
    data: *const RrDataset,
    scores: *mut f64,
    len: usize,
) -> RrStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let d = ref_arg(data, "data")?;
        if scores.is_null() {
            return Err(null("scores"));
        }
        if len != d.0.n_samples() {
            return Err(Fail(RrStatus::InvalidArgument, format!("buffer holds {len} scores, dataset has {}", d.0.n_samples())));
        }
        let s = m.0.scores(&d.0)?;
        std::slice::from_raw_parts_mut(scores, len).copy_from_slice(&s);
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rr_model_free(model: *mut RrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
