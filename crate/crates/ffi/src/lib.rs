//! C ABI over the patchguide library.
//!
//! Conventions:
//! - Every fallible function returns a [`PgStatus`] and writes its result
//!   through an out-pointer only on `PG_STATUS_OK`.
//! - On failure a message is stored per thread; fetch it with
//!   [`pg_last_error_message`].
//! - Strings returned through out-pointers are owned by the caller and must be
//!   released with [`pg_string_free`].
//! - Panics never cross the boundary; they surface as `PG_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use patchguide::corpus::Language;
use patchguide::diff::{line_diff, render_unified};
use patchguide::evaluation::{cohens_kappa, exact_match, ratcliff_obershelp};
use patchguide::lexer::normalize_code;
use patchguide::store::{PatternStore, StoreError};

pub const PG_LANGUAGE_C: i32 = 0;
pub const PG_LANGUAGE_CPP: i32 = 1;
pub const PG_LANGUAGE_JAVA: i32 = 2;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Parse = 5,
    Lex = 6,
    Panic = 7,
}

/// Pattern store loaded from a JSONL file. Opaque to C.
pub struct PgPatternStore {
    inner: PatternStore,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let msg = message.into().replace('\0', "\\0");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: PgStatus, message: impl Into<String>) -> PgStatus {
    set_error(message);
    status
}

fn guard(f: impl FnOnce() -> PgStatus) -> PgStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(PgStatus::Panic, "internal panic"))
}

/// # Safety
/// `ptr` is NULL or a NUL-terminated string valid for the call.
unsafe fn read_str<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, PgStatus> {
    if ptr.is_null() {
        return Err(fail(PgStatus::NullArgument, format!("{name} is NULL")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| fail(PgStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

fn language(code: i32) -> Result<Language, PgStatus> {
    match code {
        PG_LANGUAGE_C => Ok(Language::C),
        PG_LANGUAGE_CPP => Ok(Language::Cpp),
        PG_LANGUAGE_JAVA => Ok(Language::Java),
        other => Err(fail(PgStatus::InvalidArgument, format!("unknown language code {other}"))),
    }
}

/// # Safety
/// `out` is a valid, writable pointer.
unsafe fn write_string(out: *mut *mut c_char, value: String) -> PgStatus {
    match CString::new(value) {
        Ok(s) => {
            *out = s.into_raw();
            PgStatus::Ok
        }
        Err(_) => fail(PgStatus::InvalidArgument, "result contains an interior NUL byte"),
    }
}

macro_rules! try_status {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(status) => return status,
        }
    };
}

macro_rules! non_null {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            return fail(PgStatus::NullArgument, concat!(stringify!($p), " is NULL"));
        })+
    };
}

/// Library version as a static string; never free it.
#[no_mangle]
pub extern "C" fn pg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copy of the last error message on this thread, or NULL if none.
/// Free with [`pg_string_free`].
#[no_mangle]
pub extern "C" fn pg_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null_mut(), |s| s.clone().into_raw()))
}

/// # Safety
/// `s` is NULL or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a pattern store from a JSONL file.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pg_store_open(path: *const c_char, out: *mut *mut PgPatternStore) -> PgStatus {
    guard(|| {
        non_null!(out);
        let path = try_status!(read_str(path, "path"));
        match PatternStore::load(Path::new(path)) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(PgPatternStore { inner }));
                PgStatus::Ok
            }
            Err(e @ StoreError::Io(_)) => fail(PgStatus::Io, format!("{path}: {e}")),
            Err(e) => fail(PgStatus::Parse, format!("{path}: {e}")),
        }
    })
}

/// # Safety
/// `store` is NULL or a handle from [`pg_store_open`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pg_store_free(store: *mut PgPatternStore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}

/// Number of patterns; 0 for a NULL handle.
///
/// # Safety
/// `store` is NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pg_store_len(store: *const PgPatternStore) -> usize {
    store.as_ref().map_or(0, |s| s.inner.len())
}

/// Patterns for one CWE id as a JSON array, in insertion order.
///
/// # Safety
/// `store` is a live handle, `cwe_id` a NUL-terminated string, `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn pg_store_query_cwe(
    store: *const PgPatternStore,
    cwe_id: *const c_char,
    out_json: *mut *mut c_char,
) -> PgStatus {
    guard(|| {
        non_null!(store, out_json);
        let cwe_id = try_status!(read_str(cwe_id, "cwe_id"));
        let patterns = (*store).inner.query_by_cwe(cwe_id);
        let json = serde_json::to_string(&patterns).expect("patterns serialize");
        write_string(out_json, json)
    })
}

/// Per-CWE and per-action counts as a JSON object.
///
/// # Safety
/// `store` is a live handle and `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn pg_store_stats(store: *const PgPatternStore, out_json: *mut *mut c_char) -> PgStatus {
    guard(|| {
        non_null!(store, out_json);
        let json = serde_json::to_string(&(*store).inner.stats()).expect("stats serialize");
        write_string(out_json, json)
    })
}

/// Normalized token sequence of `source`, tokens joined by single spaces.
///
/// # Safety
/// `source` is a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pg_normalize_code(source: *const c_char, language_code: i32, out: *mut *mut c_char) -> PgStatus {
    guard(|| {
        non_null!(out);
        let source = try_status!(read_str(source, "source"));
        let lang = try_status!(language(language_code));
        match normalize_code(source, lang) {
            Ok(tokens) => write_string(out, tokens.joined()),
            Err(e) => fail(PgStatus::Lex, e.to_string()),
        }
    })
}

/// Whether `candidate` equals `ground_truth` after normalization.
///
/// # Safety
/// Both strings are NUL-terminated and `out_match` is writable.
#[no_mangle]
pub unsafe extern "C" fn pg_exact_match(
    candidate: *const c_char,
    ground_truth: *const c_char,
    language_code: i32,
    out_match: *mut bool,
) -> PgStatus {
    guard(|| {
        non_null!(out_match);
        let candidate = try_status!(read_str(candidate, "candidate"));
        let ground_truth = try_status!(read_str(ground_truth, "ground_truth"));
        let lang = try_status!(language(language_code));
        *out_match = exact_match(candidate, ground_truth, lang);
        PgStatus::Ok
    })
}

/// Unified line diff (hunk headers and +/- lines) with `context` lines.
///
/// # Safety
/// Both strings are NUL-terminated and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pg_line_diff(
    old_text: *const c_char,
    new_text: *const c_char,
    context: u32,
    out: *mut *mut c_char,
) -> PgStatus {
    guard(|| {
        non_null!(out);
        let old_text = try_status!(read_str(old_text, "old_text"));
        let new_text = try_status!(read_str(new_text, "new_text"));
        write_string(out, render_unified(&line_diff(old_text, new_text), context as usize))
    })
}

/// Ratcliff/Obershelp similarity in [0, 1].
///
/// # Safety
/// Both strings are NUL-terminated and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pg_similarity(a: *const c_char, b: *const c_char, out: *mut f64) -> PgStatus {
    guard(|| {
        non_null!(out);
        let a = try_status!(read_str(a, "a"));
        let b = try_status!(read_str(b, "b"));
        *out = ratcliff_obershelp(a, b);
        PgStatus::Ok
    })
}

/// Cohen's kappa over two label arrays of length `len`.
///
/// # Safety
/// `labels_a` and `labels_b` point to `len` readable values; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pg_cohens_kappa(
    labels_a: *const i32,
    labels_b: *const i32,
    len: usize,
    out: *mut f64,
) -> PgStatus {
    guard(|| {
        non_null!(labels_a, labels_b, out);
        let a = std::slice::from_raw_parts(labels_a, len);
        let b = std::slice::from_raw_parts(labels_b, len);
        match cohens_kappa(a, b) {
            Ok(k) => {
                *out = k;
                PgStatus::Ok
            }
            Err(e) => fail(PgStatus::InvalidArgument, e.to_string()),
        }
    })
}
