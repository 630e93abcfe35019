//! C bindings for the chat engine.
//!
//! Handles are opaque pointers owned by the caller and released with the
//! matching `*_free`. Every fallible call returns a [`KgcrsStatus`]; on failure
//! [`kgcrs_last_error_message`] describes the error for the calling thread.
//! Strings returned through out-parameters are UTF-8 JSON released with
//! [`kgcrs_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use kgcrs_core::harness::session::Session;
use kgcrs_core::harness::Engine;
use kgcrs_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KgcrsStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    Checkpoint = 5,
    InvalidMessage = 6,
    Internal = 7,
    Panic = 8,
}

pub struct KgcrsEngine {
    inner: Arc<Engine>,
}

pub struct KgcrsSession {
    engine: Arc<Engine>,
    session: Session,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

static NEXT_SESSION: AtomicU64 = AtomicU64::new(1);

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> KgcrsStatus {
    match e {
        Error::Io { .. } => KgcrsStatus::Io,
        Error::Parse { .. } | Error::DanglingId { .. } | Error::Json(_) | Error::Config(_) => KgcrsStatus::Parse,
        Error::Checkpoint(_) | Error::Dimension(_) => KgcrsStatus::Checkpoint,
        Error::InvalidMessage(_) => KgcrsStatus::InvalidMessage,
        _ => KgcrsStatus::Internal,
    }
}

struct Failure(KgcrsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

/// Runs `f`, recording any error or panic for the calling thread.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> KgcrsStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => KgcrsStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            KgcrsStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(KgcrsStatus::NullArgument, format!("{what} is NULL")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(KgcrsStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

fn null(what: &str) -> Failure {
    Failure(KgcrsStatus::NullArgument, format!("{what} is NULL"))
}

fn json_out(value: serde_json::Result<String>, out: *mut *mut c_char) -> Result<(), Failure> {
    let s = value.map_err(|e| Failure(KgcrsStatus::Internal, e.to_string()))?;
    let c = CString::new(s).map_err(|e| Failure(KgcrsStatus::Internal, e.to_string()))?;
    unsafe { *out = c.into_raw() };
    Ok(())
}

/// Loads a checkpoint directory against the knowledge graph file it was trained on.
///
/// # Safety
/// `checkpoint_dir` and `kg_path` must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kgcrs_engine_open(
    checkpoint_dir: *const c_char,
    kg_path: *const c_char,
    out: *mut *mut KgcrsEngine,
) -> KgcrsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let dir = text(checkpoint_dir, "checkpoint_dir")?;
        let kg = text(kg_path, "kg_path")?;
        let engine = Engine::open(Path::new(dir), Path::new(kg), None)?;
        *out = Box::into_raw(Box::new(KgcrsEngine {
            inner: Arc::new(engine),
        }));
        Ok(())
    })
}

/// Sets how many recommendations each reply carries.
///
/// # Safety
/// `engine` must come from [`kgcrs_engine_open`] and have no live sessions.
#[no_mangle]
pub unsafe extern "C" fn kgcrs_engine_set_recommendations(engine: *mut KgcrsEngine, count: usize) -> KgcrsStatus {
    guard(|| {
        let e = engine.as_mut().ok_or_else(|| null("engine"))?;
        let inner = Arc::get_mut(&mut e.inner)
            .ok_or_else(|| Failure(KgcrsStatus::Internal, "engine has live sessions".into()))?;
        inner.recommendations = count;
        Ok(())
    })
}

/// # Safety
/// `engine` must come from [`kgcrs_engine_open`] or be NULL. Sessions keep
/// the model alive independently.
#[no_mangle]
pub unsafe extern "C" fn kgcrs_engine_free(engine: *mut KgcrsEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// # Safety
/// `engine` must be a live engine handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kgcrs_session_new(engine: *const KgcrsEngine, out: *mut *mut KgcrsSession) -> KgcrsStatus {
    guard(|| {
        let e = engine.as_ref().ok_or_else(|| null("engine"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let id = format!("ffi-{}", NEXT_SESSION.fetch_add(1, Ordering::Relaxed));
        *out = Box::into_raw(Box::new(KgcrsSession {
            engine: e.inner.clone(),
            session: Session::new(id),
        }));
        Ok(())
    })
}

/// Sends one user message. `out_json` receives
/// `{response_text, recommendations, subgraph}`.
///
/// # Safety
/// `session` must be a live session handle not used concurrently; `message`
/// NUL-terminated; `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn kgcrs_session_send(
    session: *mut KgcrsSession,
    message: *const c_char,
    out_json: *mut *mut c_char,
) -> KgcrsStatus {
    guard(|| {
        let s = session.as_mut().ok_or_else(|| null("session"))?;
        let msg = text(message, "message")?;
        if out_json.is_null() {
            return Err(null("out_json"));
        }
        let exchange = s.engine.respond(&s.session.context(), msg)?;
        json_out(serde_json::to_string(&exchange.response), out_json)?;
        s.session.apply(&exchange);
        Ok(())
    })
}

/// Writes the whole session (history, entities, last subgraph and
/// recommendations) as JSON.
///
/// # Safety
/// `session` must be a live session handle; `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn kgcrs_session_json(session: *const KgcrsSession, out_json: *mut *mut c_char) -> KgcrsStatus {
    guard(|| {
        let s = session.as_ref().ok_or_else(|| null("session"))?;
        if out_json.is_null() {
            return Err(null("out_json"));
        }
        json_out(serde_json::to_string(&s.session), out_json)
    })
}

/// # Safety
/// `session` must come from [`kgcrs_session_new`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn kgcrs_session_free(session: *mut KgcrsSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// # Safety
/// `s` must be a string returned by this library or NULL.
#[no_mangle]
pub unsafe extern "C" fn kgcrs_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn kgcrs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn kgcrs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
