//! C ABI over the graph, metric and conclusion-parsing parts of `kgcot`.
//!
//! Every fallible function returns a [`KgcotStatus`]. On failure a message is
//! kept per thread and can be read with [`kgcot_last_error_message`]. Strings
//! returned through `char **` out-parameters are owned by the caller and must
//! be released with [`kgcot_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use kgcot::cot::{parse_conclusion, Conclusion};
use kgcot::kg::{load_graph, KgError, KnowledgeGraph, PathQuery};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KgcotStatus {
    Ok = 0,
    /// Null pointer, invalid UTF-8, bad bound or label outside {0, 1}.
    InvalidArgument = 1,
    /// Unreadable or malformed input tables.
    Input = 2,
    /// A node id that is not in the graph.
    NotFound = 3,
    /// The metric is undefined for this input (a class is empty).
    Undefined = 4,
    /// A Rust panic was caught at the boundary.
    Panic = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KgcotConclusion {
    No = 0,
    Yes = 1,
    Unparseable = 2,
}

/// Opaque handle to a loaded knowledge graph.
pub struct KgcotGraph {
    inner: KnowledgeGraph,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(KgcotStatus, String);

fn set_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> KgcotStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            KgcotStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(&message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal panic: {message}"));
            KgcotStatus::Panic
        }
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure(KgcotStatus::InvalidArgument, message.into())
}

unsafe fn str_arg<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(invalid(format!("{name} is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| invalid(format!("{name} is not valid UTF-8")))
}

fn kg_failure(err: KgError) -> Failure {
    let status = match err {
        KgError::UnknownNode(_) => KgcotStatus::NotFound,
        KgError::SameEndpoints(_) | KgError::InvalidBound => KgcotStatus::InvalidArgument,
        _ => KgcotStatus::Input,
    };
    Failure(status, err.to_string())
}

/// Load a graph from node and edge tables with the default TSV columns.
///
/// # Safety
/// `nodes_path` and `edges_path` must be NUL-terminated strings and `out` a
/// writable pointer. On success `*out` must later be passed to
/// [`kgcot_graph_free`].
#[no_mangle]
pub unsafe extern "C" fn kgcot_graph_load(
    nodes_path: *const c_char,
    edges_path: *const c_char,
    out: *mut *mut KgcotGraph,
) -> KgcotStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        *out = std::ptr::null_mut();
        let nodes = str_arg(nodes_path, "nodes_path")?;
        let edges = str_arg(edges_path, "edges_path")?;
        let (inner, _) = load_graph(Path::new(nodes), Path::new(edges), None).map_err(kg_failure)?;
        *out = Box::into_raw(Box::new(KgcotGraph { inner }));
        Ok(())
    })
}

/// Release a graph. Null is ignored.
///
/// # Safety
/// `graph` must come from [`kgcot_graph_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn kgcot_graph_free(graph: *mut KgcotGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

unsafe fn graph_ref<'a>(graph: *const KgcotGraph) -> Result<&'a KnowledgeGraph, Failure> {
    graph.as_ref().map(|g| &g.inner).ok_or_else(|| invalid("graph is null"))
}

/// # Safety
/// `graph` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn kgcot_graph_node_count(graph: *const KgcotGraph, out: *mut usize) -> KgcotStatus {
    guard(|| {
        let g = graph_ref(graph)?;
        let out = out.as_mut().ok_or_else(|| invalid("out is null"))?;
        *out = g.node_count();
        Ok(())
    })
}

/// # Safety
/// `graph` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn kgcot_graph_edge_count(graph: *const KgcotGraph, out: *mut usize) -> KgcotStatus {
    guard(|| {
        let g = graph_ref(graph)?;
        let out = out.as_mut().ok_or_else(|| invalid("out is null"))?;
        *out = g.edge_count();
        Ok(())
    })
}

/// All minimum-length paths from `src` to `dst` within `max_hops`, as a JSON
/// array of `{"nodes": [...], "steps": [...]}` objects. An empty array means
/// no path within the bound.
///
/// # Safety
/// `graph` must be a live handle, `src` and `dst` NUL-terminated strings and
/// `out_json` writable. The returned string is freed with [`kgcot_string_free`].
#[no_mangle]
pub unsafe extern "C" fn kgcot_shortest_paths_json(
    graph: *const KgcotGraph,
    src: *const c_char,
    dst: *const c_char,
    max_hops: usize,
    max_paths: usize,
    directed: bool,
    out_json: *mut *mut c_char,
) -> KgcotStatus {
    guard(|| {
        if out_json.is_null() {
            return Err(invalid("out_json is null"));
        }
        *out_json = std::ptr::null_mut();
        let g = graph_ref(graph)?;
        let src = str_arg(src, "src")?;
        let dst = str_arg(dst, "dst")?;
        let query = PathQuery::new(max_hops, max_paths).directed(directed);
        let paths = g.all_shortest_paths(src, dst, &query).map_err(kg_failure)?;
        let json = serde_json::to_string(&paths).map_err(|e| Failure(KgcotStatus::Input, e.to_string()))?;
        *out_json = CString::new(json).map_err(|e| invalid(e.to_string()))?.into_raw();
        Ok(())
    })
}

unsafe fn metric_args<'a>(scores: *const f64, labels: *const u8, n: usize) -> Result<(&'a [f64], &'a [u8]), Failure> {
    if n == 0 {
        return Ok((&[], &[]));
    }
    if scores.is_null() || labels.is_null() {
        return Err(invalid("scores or labels is null"));
    }
    let scores = std::slice::from_raw_parts(scores, n);
    let labels = std::slice::from_raw_parts(labels, n);
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(invalid(format!("score {i} is not finite")));
    }
    if let Some(i) = labels.iter().position(|&y| y > 1) {
        return Err(invalid(format!("label {i} is {}, expected 0 or 1", labels[i])));
    }
    Ok((scores, labels))
}

type Metric = fn(&[f64], &[u8]) -> Result<Option<f64>, kgcot::eval::EvalError>;

unsafe fn metric(metric: Metric, name: &str, scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> KgcotStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| invalid("out is null"))?;
        *out = f64::NAN;
        let (s, y) = metric_args(scores, labels, n)?;
        match metric(s, y).map_err(|e| invalid(e.to_string()))? {
            Some(v) => {
                *out = v;
                Ok(())
            }
            None => Err(Failure(KgcotStatus::Undefined, format!("{name} is undefined for this label set"))),
        }
    })
}

/// Area under the ROC curve with ties counted one half. Returns
/// `Undefined` (and writes NaN) when either class is empty.
///
/// # Safety
/// `scores` and `labels` must each point to `n` readable elements; `out` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn kgcot_auroc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> KgcotStatus {
    metric(kgcot::eval::auroc, "AUROC", scores, labels, n, out)
}

/// Average precision over descending unique thresholds. Returns `Undefined`
/// (and writes NaN) when there are no positives.
///
/// # Safety
/// Same contract as [`kgcot_auroc`].
#[no_mangle]
pub unsafe extern "C" fn kgcot_aupr(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> KgcotStatus {
    metric(kgcot::eval::aupr, "AUPR", scores, labels, n, out)
}

/// Read the `Conclusion: Yes|No` verdict of a generated rationale.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn kgcot_parse_conclusion(text: *const c_char, out: *mut KgcotConclusion) -> KgcotStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| invalid("out is null"))?;
        *out = match parse_conclusion(str_arg(text, "text")?) {
            Conclusion::Yes => KgcotConclusion::Yes,
            Conclusion::No => KgcotConclusion::No,
            Conclusion::Unparseable => KgcotConclusion::Unparseable,
        };
        Ok(())
    })
}

/// Message for the last failed call on this thread, or "" after a success.
/// The pointer stays valid until the next `kgcot_*` call on the same thread.
#[no_mangle]
pub extern "C" fn kgcot_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Free a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn kgcot_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn kgcot_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
