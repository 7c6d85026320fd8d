//! C ABI over `rgib-core`.
//!
//! Every function returns an [`RgibStatus`]. On failure a message is available
//! from [`rgib_last_error_message`] on the same thread. Handles are opaque and
//! must be released with their matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use rgib_core::encoder::{embed, EmbeddingSource};
use rgib_core::graph::{
    generate_sbm, normalize_adjacency, row_l2_normalize, AttributedGraph, SbmSpec,
};
use rgib_core::io::{self, Checkpoint};
use rgib_core::trainer::{TrainConfig, TrainHistory, Trainer};
use rgib_core::Error;

/// Result code of every `rgib_*` call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RgibStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidConfig = 3,
    Data = 4,
    Numeric = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Attributed graph.
pub struct RgibGraph {
    graph: AttributedGraph,
}

/// Training configuration.
pub struct RgibConfig {
    config: TrainConfig,
}

/// Trained encoder with its configuration and training history.
pub struct RgibModel {
    checkpoint: Checkpoint,
    history: TrainHistory,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(e: &Error) -> RgibStatus {
    match e {
        Error::InvalidConfig(_) => RgibStatus::InvalidConfig,
        Error::InvalidArgument(_) | Error::ShapeMismatch { .. } => RgibStatus::InvalidArgument,
        Error::NonFinite(_) => RgibStatus::Numeric,
        _ => RgibStatus::Data,
    }
}

/// Runs `f`, converting errors and panics into a status and a stored message.
fn guard(f: impl FnOnce() -> Result<(), (RgibStatus, String)>) -> RgibStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RgibStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            RgibStatus::Panic
        }
    }
}

fn core<T>(r: rgib_core::Result<T>) -> Result<T, (RgibStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (RgibStatus, String) {
    (RgibStatus::NullPointer, format!("{what} is null"))
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, (RgibStatus, String)> {
    // SAFETY: caller passes either null or a live handle from this library.
    unsafe { p.as_ref() }.ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, (RgibStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: caller guarantees a NUL-terminated string.
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| (RgibStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn put<T>(out: *mut *mut T, value: T) {
    // SAFETY: `out` was checked non-null by the caller.
    unsafe { *out = Box::into_raw(Box::new(value)) };
}

/// Message for the last failed call on this thread, or NULL. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rgib_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads a graph file, optionally row-normalising its features.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn rgib_graph_load(
    path: *const c_char,
    normalize: bool,
    out: *mut *mut RgibGraph,
) -> RgibStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = unsafe { path_arg(path, "path") }?;
        let mut graph = core(io::load_graph_file(&path))?;
        if normalize {
            graph = core(graph.with_features(row_l2_normalize(graph.features())))?;
        }
        unsafe { put(out, RgibGraph { graph }) };
        Ok(())
    })
}

/// Generates a stochastic block model graph with row-normalised features.
///
/// # Safety
/// `out` must be a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn rgib_graph_sbm(
    n_per_block: usize,
    blocks: usize,
    p_in: f64,
    p_out: f64,
    feature_dim: usize,
    feature_shift: f64,
    seed: u64,
    out: *mut *mut RgibGraph,
) -> RgibStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let spec = SbmSpec {
            n_per_block,
            blocks,
            p_in,
            p_out,
            feature_dim,
            feature_shift,
        };
        let g = core(generate_sbm(&spec, seed))?;
        let graph = core(g.with_features(row_l2_normalize(g.features())))?;
        unsafe { put(out, RgibGraph { graph }) };
        Ok(())
    })
}

/// Number of nodes, or 0 for NULL.
///
/// # Safety
/// `graph` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rgib_graph_num_nodes(graph: *const RgibGraph) -> usize {
    unsafe { graph.as_ref() }.map_or(0, |g| g.graph.num_nodes())
}

/// Number of undirected edges, or 0 for NULL.
///
/// # Safety
/// `graph` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rgib_graph_num_edges(graph: *const RgibGraph) -> usize {
    unsafe { graph.as_ref() }.map_or(0, |g| g.graph.num_edges())
}

/// # Safety
/// `graph` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rgib_graph_free(graph: *mut RgibGraph) {
    if !graph.is_null() {
        // SAFETY: handle came from Box::into_raw in this library.
        drop(unsafe { Box::from_raw(graph) });
    }
}

/// Default configuration.
///
/// # Safety
/// `out` must be a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn rgib_config_default(out: *mut *mut RgibConfig) -> RgibStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        unsafe {
            put(
                out,
                RgibConfig {
                    config: TrainConfig::default(),
                },
            )
        };
        Ok(())
    })
}

/// Parses a flat JSON configuration; missing keys take defaults, unknown keys
/// are rejected.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn rgib_config_from_json(
    json: *const c_char,
    out: *mut *mut RgibConfig,
) -> RgibStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if json.is_null() {
            return Err(null("json"));
        }
        let text = unsafe { CStr::from_ptr(json) }
            .to_str()
            .map_err(|_| (RgibStatus::InvalidArgument, "json is not UTF-8".to_string()))?;
        let config: TrainConfig =
            serde_json::from_str(text).map_err(|e| (RgibStatus::InvalidConfig, e.to_string()))?;
        core(config.validate())?;
        unsafe { put(out, RgibConfig { config }) };
        Ok(())
    })
}

/// # Safety
/// `config` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rgib_config_free(config: *mut RgibConfig) {
    if !config.is_null() {
        // SAFETY: handle came from Box::into_raw in this library.
        drop(unsafe { Box::from_raw(config) });
    }
}

/// Trains an encoder on `graph`.
///
/// # Safety
/// `graph` and `config` must be live handles and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn rgib_train(
    graph: *const RgibGraph,
    config: *const RgibConfig,
    out: *mut *mut RgibModel,
) -> RgibStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let g = unsafe { borrow(graph, "graph") }?;
        let c = unsafe { borrow(config, "config") }?;
        let (params, history) = core(Trainer::new(&g.graph, &c.config).and_then(|t| t.run()))?;
        let checkpoint = Checkpoint {
            config: c.config.clone(),
            epochs_completed: history.len(),
            params,
        };
        unsafe {
            put(
                out,
                RgibModel {
                    checkpoint,
                    history,
                },
            )
        };
        Ok(())
    })
}

/// Embedding width, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rgib_model_embed_dim(model: *const RgibModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.checkpoint.params.embed_dim())
}

/// Objective logged at the last training epoch.
///
/// # Safety
/// `model` must be a live handle and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn rgib_model_final_objective(
    model: *const RgibModel,
    out: *mut f64,
) -> RgibStatus {
    guard(|| {
        let m = unsafe { borrow(model, "model") }?;
        if out.is_null() {
            return Err(null("out"));
        }
        let last = m.history.records.last().ok_or_else(|| {
            (
                RgibStatus::InvalidArgument,
                "model has no training history".to_string(),
            )
        })?;
        unsafe { *out = last.objective };
        Ok(())
    })
}

/// Writes the deterministic embeddings of `graph` row-major into `buf`, which
/// must hold `num_nodes · embed_dim` values.
///
/// # Safety
/// `model` and `graph` must be live handles and `buf` must point to `len`
/// writable doubles.
#[no_mangle]
pub unsafe extern "C" fn rgib_model_embed(
    model: *const RgibModel,
    graph: *const RgibGraph,
    buf: *mut f64,
    len: usize,
) -> RgibStatus {
    guard(|| {
        let m = unsafe { borrow(model, "model") }?;
        let g = unsafe { borrow(graph, "graph") }?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let need = g.graph.num_nodes() * m.checkpoint.params.embed_dim();
        if len < need {
            return Err((
                RgibStatus::BufferTooSmall,
                format!("buffer holds {len} values, need {need}"),
            ));
        }
        let emb = core(embed(
            &m.checkpoint.params,
            &normalize_adjacency(&g.graph),
            g.graph.features(),
            EmbeddingSource::Benign,
        ))?;
        // SAFETY: `buf` has room for `need` values, checked above.
        unsafe { ptr::copy_nonoverlapping(emb.mu.as_slice().as_ptr(), buf, need) };
        Ok(())
    })
}

/// Saves a JSON checkpoint.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rgib_model_save(
    model: *const RgibModel,
    path: *const c_char,
) -> RgibStatus {
    guard(|| {
        let m = unsafe { borrow(model, "model") }?;
        let path = unsafe { path_arg(path, "path") }?;
        core(io::save_checkpoint(&path, &m.checkpoint))
    })
}

/// Loads a JSON checkpoint. The loaded model carries no training history.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn rgib_model_load(
    path: *const c_char,
    out: *mut *mut RgibModel,
) -> RgibStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = unsafe { path_arg(path, "path") }?;
        let checkpoint = core(io::load_checkpoint(&path))?;
        unsafe {
            put(
                out,
                RgibModel {
                    checkpoint,
                    history: TrainHistory::default(),
                },
            )
        };
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rgib_model_free(model: *mut RgibModel) {
    if !model.is_null() {
        // SAFETY: handle came from Box::into_raw in this library.
        drop(unsafe { Box::from_raw(model) });
    }
}
