//! C ABI over the qralign core: a search engine handle for retrieval and
//! relevance, and a serving handle that answers rewrite requests through the
//! TTL cache.
//!
//! Every function returns a `QrStatus`. On failure a message is kept per
//! thread and can be read with `qr_last_error`. Handles and strings returned
//! by the library must be released with the matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use qralign::catalog::{generate_catalog, CatalogConfig};
use qralign::engine::SearchEngine;
use qralign::eval::EvalConfig;
use qralign::index::Bm25Params;
use qralign::policy::checkpoint;
use qralign::serving::{checkpoint_hash, RewriteCache, Server, SystemClock};
use qralign::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QrStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    MissingArtifact = 4,
    CorruptArtifact = 5,
    BufferTooSmall = 6,
    Internal = 7,
}

/// Opaque search engine over a generated catalog.
pub struct QrEngine {
    inner: SearchEngine,
}

/// Opaque rewrite server bound to one checkpoint.
pub struct QrServer {
    inner: Server<SystemClock>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn status_of(err: &Error) -> QrStatus {
    match err {
        Error::MissingArtifact(_) => QrStatus::MissingArtifact,
        Error::CorruptArtifact { .. } => QrStatus::CorruptArtifact,
        Error::Io { .. } => QrStatus::Internal,
        _ => QrStatus::InvalidArgument,
    }
}

fn guard(body: impl FnOnce() -> Result<(), QrStatus>) -> QrStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => QrStatus::Ok,
        Ok(Err(status)) => status,
        Err(_) => {
            set_error("panic inside qralign");
            QrStatus::Internal
        }
    }
}

fn fail(err: Error) -> QrStatus {
    set_error(err.to_string());
    status_of(&err)
}

unsafe fn text<'a>(p: *const c_char, name: &str) -> Result<&'a str, QrStatus> {
    if p.is_null() {
        set_error(format!("{name} is null"));
        return Err(QrStatus::NullArgument);
    }
    // SAFETY: caller passes a NUL-terminated string that outlives the call.
    unsafe { CStr::from_ptr(p) }.to_str().map_err(|_| {
        set_error(format!("{name} is not valid UTF-8"));
        QrStatus::InvalidUtf8
    })
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), QrStatus> {
    if p.is_null() {
        set_error(format!("{name} is null"));
        Err(QrStatus::NullArgument)
    } else {
        Ok(())
    }
}

/// Message of the last failure on this thread, or NULL. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn qr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Generates the catalog for the given grammar sizes and builds an engine
/// with default BM25 parameters.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn qr_engine_new(
    brands: usize,
    categories: usize,
    modifiers: usize,
    seed: u64,
    recall_depth: usize,
    out: *mut *mut QrEngine,
) -> QrStatus {
    guard(|| {
        non_null(out, "out")?;
        let config = CatalogConfig {
            brands,
            categories,
            modifiers,
            seed,
            ..CatalogConfig::default()
        };
        let catalog = generate_catalog(&config).map_err(fail)?;
        let inner = SearchEngine::new(catalog, Bm25Params::default(), recall_depth).map_err(fail)?;
        // SAFETY: checked non-null above.
        unsafe { *out = Box::into_raw(Box::new(QrEngine { inner })) };
        Ok(())
    })
}

/// # Safety
/// `engine` must come from `qr_engine_new` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn qr_engine_free(engine: *mut QrEngine) {
    if !engine.is_null() {
        // SAFETY: ownership returns to Rust exactly once.
        drop(unsafe { Box::from_raw(engine) });
    }
}

/// Number of products in the engine's catalog.
///
/// # Safety
/// `engine` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn qr_engine_len(engine: *const QrEngine) -> usize {
    // SAFETY: caller guarantees a live handle or NULL.
    unsafe { engine.as_ref() }.map_or(0, |e| e.inner.catalog.len())
}

/// Writes the ranked product ids retrieved for `query` into `ids`.
/// `len` receives the full result count; `BufferTooSmall` is returned when
/// it exceeds `capacity`, with the first `capacity` ids written.
///
/// # Safety
/// `ids` must point to `capacity` writable `uint32_t`; `len` to one `size_t`.
#[no_mangle]
pub unsafe extern "C" fn qr_engine_retrieve(
    engine: *const QrEngine,
    query: *const c_char,
    ids: *mut u32,
    capacity: usize,
    len: *mut usize,
) -> QrStatus {
    guard(|| {
        non_null(engine, "engine")?;
        non_null(len, "len")?;
        if capacity > 0 {
            non_null(ids, "ids")?;
        }
        // SAFETY: pointers checked above; caller owns the buffers.
        let engine = unsafe { &*engine };
        let query = unsafe { text(query, "query") }?;
        let found: Vec<u32> = engine.inner.retrieve(query).ids().collect();
        unsafe { *len = found.len() };
        for (i, id) in found.iter().take(capacity).enumerate() {
            unsafe { *ids.add(i) = *id };
        }
        if found.len() > capacity {
            set_error(format!("{} results do not fit in {capacity}", found.len()));
            return Err(QrStatus::BufferTooSmall);
        }
        Ok(())
    })
}

/// Aggregate relevance of the top `top_m` products `rewrite` retrieves,
/// judged against `query`.
///
/// # Safety
/// `engine` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn qr_engine_relevance(
    engine: *const QrEngine,
    query: *const c_char,
    rewrite: *const c_char,
    top_m: usize,
    out: *mut f64,
) -> QrStatus {
    guard(|| {
        non_null(engine, "engine")?;
        non_null(out, "out")?;
        // SAFETY: checked above.
        let engine = unsafe { &*engine };
        let query = unsafe { text(query, "query") }?;
        let rewrite = unsafe { text(rewrite, "rewrite") }?;
        let recall = engine.inner.retrieve(rewrite);
        unsafe { *out = engine.inner.aggregate_relevance(query, &recall, top_m).value() };
        Ok(())
    })
}

/// Loads a checkpoint and opens a server whose cache entries live
/// `ttl_secs` seconds. The cache starts empty.
///
/// # Safety
/// `checkpoint_path` must be a NUL-terminated path; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn qr_server_open(
    checkpoint_path: *const c_char,
    ttl_secs: u64,
    out: *mut *mut QrServer,
) -> QrStatus {
    guard(|| {
        non_null(out, "out")?;
        // SAFETY: caller passes a valid string.
        let path = unsafe { text(checkpoint_path, "checkpoint_path") }?;
        if ttl_secs == 0 {
            set_error("ttl_secs must be >= 1");
            return Err(QrStatus::InvalidArgument);
        }
        let policy = checkpoint::load(Path::new(path)).map_err(fail)?;
        let cache = RewriteCache::new(ttl_secs, checkpoint_hash(&policy));
        let inner = Server::new(policy, cache, SystemClock, &EvalConfig::default()).map_err(fail)?;
        unsafe { *out = Box::into_raw(Box::new(QrServer { inner })) };
        Ok(())
    })
}

/// # Safety
/// `server` must come from `qr_server_open` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn qr_server_free(server: *mut QrServer) {
    if !server.is_null() {
        // SAFETY: ownership returns to Rust exactly once.
        drop(unsafe { Box::from_raw(server) });
    }
}

/// Serves `query`: up to three rewrites joined by newlines, written to `out`
/// as a string owned by the caller (release with `qr_string_free`).
/// `cache_hit` may be NULL.
///
/// # Safety
/// `server` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn qr_server_serve(
    server: *const QrServer,
    query: *const c_char,
    out: *mut *mut c_char,
    cache_hit: *mut bool,
) -> QrStatus {
    guard(|| {
        non_null(server, "server")?;
        non_null(out, "out")?;
        // SAFETY: checked above.
        let server = unsafe { &*server };
        let query = unsafe { text(query, "query") }?;
        let served = server.inner.serve(query).map_err(fail)?;
        let joined = CString::new(served.rewrites.join("\n")).map_err(|_| {
            set_error("rewrite contains NUL");
            QrStatus::Internal
        })?;
        unsafe {
            *out = joined.into_raw();
            if !cache_hit.is_null() {
                *cache_hit = served.cache_hit;
            }
        }
        Ok(())
    })
}

/// Number of model decodes the server has run.
///
/// # Safety
/// `server` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn qr_server_decodes(server: *const QrServer) -> usize {
    // SAFETY: caller guarantees a live handle or NULL.
    unsafe { server.as_ref() }.map_or(0, |s| s.inner.decodes())
}

/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn qr_string_free(s: *mut c_char) {
    if !s.is_null() {
        // SAFETY: the string was produced by `CString::into_raw`.
        drop(unsafe { CString::from_raw(s) });
    }
}
