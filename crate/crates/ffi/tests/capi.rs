use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use patchguide_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

/// Takes ownership of a library-allocated string.
unsafe fn take(s: *mut c_char) -> String {
    assert!(!s.is_null());
    let out = CStr::from_ptr(s).to_str().unwrap().to_string();
    pg_string_free(s);
    out
}

fn last_error() -> String {
    unsafe { take(pg_last_error_message()) }
}

const PATTERNS: &str = concat!(
    r#"{"pattern_id":"pat:a","pair_id":"a","cwe_id":"CWE-476","cwe_name":"NULL Pointer Dereference","action":"Insert Null Pointer Checker","key_element":"p == NULL","source_side":"added","validation_text":"    if (p == NULL)"}"#,
    "\n",
    r#"{"pattern_id":"pat:b","pair_id":"b","cwe_id":"CWE-787","cwe_name":"Out-of-bounds Write","action":"Insert Range Checker","key_element":"n < 8","source_side":"added","validation_text":"    if (n < 8)"}"#,
    "\n",
);

#[test]
fn store_handle_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("patterns.jsonl");
    std::fs::write(&path, PATTERNS).unwrap();
    let path = c(path.to_str().unwrap());
    unsafe {
        let mut store = ptr::null_mut();
        assert_eq!(pg_store_open(path.as_ptr(), &mut store), PgStatus::Ok);
        assert_eq!(pg_store_len(store), 2);

        let mut json = ptr::null_mut();
        assert_eq!(pg_store_query_cwe(store, c("CWE-787").as_ptr(), &mut json), PgStatus::Ok);
        let v: serde_json::Value = serde_json::from_str(&take(json)).unwrap();
        assert_eq!(v.as_array().unwrap().len(), 1);
        assert_eq!(v[0]["key_element"], "n < 8");

        assert_eq!(pg_store_query_cwe(store, c("CWE-1").as_ptr(), &mut json), PgStatus::Ok);
        assert_eq!(take(json), "[]");

        assert_eq!(pg_store_stats(store, &mut json), PgStatus::Ok);
        let stats: serde_json::Value = serde_json::from_str(&take(json)).unwrap();
        assert_eq!(stats["total"], 2);
        pg_store_free(store);
        pg_store_free(ptr::null_mut());
        assert_eq!(pg_store_len(ptr::null()), 0);
    }
}

#[test]
fn store_errors_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"pattern_id\": 1}\n").unwrap();
    unsafe {
        let mut store = ptr::null_mut();
        let missing = c(dir.path().join("missing.jsonl").to_str().unwrap());
        assert_eq!(pg_store_open(missing.as_ptr(), &mut store), PgStatus::Io);
        assert!(store.is_null());
        assert!(last_error().contains("missing.jsonl"));

        let bad = c(bad.to_str().unwrap());
        assert_eq!(pg_store_open(bad.as_ptr(), &mut store), PgStatus::Parse);
        assert!(last_error().contains("line 1"));

        assert_eq!(pg_store_open(ptr::null(), &mut store), PgStatus::NullArgument);
        assert_eq!(last_error(), "path is NULL");
        assert_eq!(pg_store_open(bad.as_ptr(), ptr::null_mut()), PgStatus::NullArgument);
    }
}

#[test]
fn normalization_and_exact_match() {
    unsafe {
        let mut out = ptr::null_mut();
        let src = c("if (a/*x*/ ==b) // tail\n  return \"//s\";");
        assert_eq!(pg_normalize_code(src.as_ptr(), PG_LANGUAGE_C, &mut out), PgStatus::Ok);
        assert_eq!(take(out), "if ( a == b ) return \"//s\" ;");

        let mut m = false;
        let gt = c("int f() { return 0; }");
        let cand = c("int f ( ) {\n  return 0 ; // ok\n}");
        assert_eq!(pg_exact_match(cand.as_ptr(), gt.as_ptr(), PG_LANGUAGE_JAVA, &mut m), PgStatus::Ok);
        assert!(m);
        let other = c("int f() { return 1; }");
        assert_eq!(pg_exact_match(other.as_ptr(), gt.as_ptr(), PG_LANGUAGE_CPP, &mut m), PgStatus::Ok);
        assert!(!m);

        assert_eq!(pg_normalize_code(c("/* open").as_ptr(), PG_LANGUAGE_C, &mut out), PgStatus::Lex);
        assert!(last_error().contains("byte 0"));
        assert_eq!(pg_normalize_code(src.as_ptr(), 9, &mut out), PgStatus::InvalidArgument);
        let invalid = [0xffu8, 0];
        assert_eq!(pg_normalize_code(invalid.as_ptr().cast(), PG_LANGUAGE_C, &mut out), PgStatus::InvalidUtf8);
    }
}

#[test]
fn diff_similarity_and_kappa() {
    unsafe {
        let mut out = ptr::null_mut();
        assert_eq!(pg_line_diff(c("a\nb\nc").as_ptr(), c("a\nB\nc").as_ptr(), 1, &mut out), PgStatus::Ok);
        assert_eq!(take(out), "@@ -1,3 +1,3 @@\n a\n-b\n+B\n c\n");

        let mut s = 0.0;
        assert_eq!(pg_similarity(c("abcd").as_ptr(), c("abed").as_ptr(), &mut s), PgStatus::Ok);
        assert!((s - 0.75).abs() < 1e-12);

        let (a, b) = ([1, 1, 1, 0], [1, 0, 1, 1]);
        let mut k = 0.0;
        assert_eq!(pg_cohens_kappa(a.as_ptr(), b.as_ptr(), 4, &mut k), PgStatus::Ok);
        assert!((k + 1.0 / 3.0).abs() < 1e-12);
        let same = [2, 2, 2];
        assert_eq!(pg_cohens_kappa(same.as_ptr(), same.as_ptr(), 3, &mut k), PgStatus::Ok);
        assert_eq!(k, 1.0);
        assert_eq!(pg_cohens_kappa(same.as_ptr(), same.as_ptr(), 0, &mut k), PgStatus::InvalidArgument);
        assert_eq!(pg_cohens_kappa(ptr::null(), b.as_ptr(), 4, &mut k), PgStatus::NullArgument);
    }
}

#[test]
fn version_and_error_state() {
    let v = unsafe { CStr::from_ptr(pg_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    std::thread::spawn(|| assert!(pg_last_error_message().is_null())).join().unwrap();
}

fn target_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links_from_c() {
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(crate_dir.join("include/patchguide.h")).unwrap();
    for name in ["pg_store_open", "pg_store_query_cwe", "pg_exact_match", "pg_last_error_message", "PG_STATUS_LEX"] {
        assert!(header.contains(name), "{name} missing from header");
    }
    let lib = target_dir().join("libpatchguide_ffi.a");
    assert!(lib.is_file(), "{} not built", lib.display());

    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include <string.h>
#include "patchguide.h"
int main(void) {
    bool m = false;
    if (pg_exact_match("a = b ;", "a=b; /* c */", PG_LANGUAGE_C, &m) != PG_STATUS_OK || !m) return 1;
    PgPatternStore *s = NULL;
    if (pg_store_open("/nonexistent/patterns.jsonl", &s) != PG_STATUS_IO) return 2;
    char *err = pg_last_error_message();
    if (err == NULL || strstr(err, "nonexistent") == NULL) return 3;
    pg_string_free(err);
    double k = 0;
    int32_t a[] = {1, 1, 1, 0}, b[] = {1, 0, 1, 1};
    if (pg_cohens_kappa(a, b, 4, &k) != PG_STATUS_OK) return 4;
    printf("%.6f\n", k);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("C compiler available");
    assert!(status.success(), "C smoke test failed to build");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "smoke exited with {:?}", out.status.code());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "-0.333333");
}
