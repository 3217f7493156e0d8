#ifndef PATCHGUIDE_H
#define PATCHGUIDE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

#define PG_LANGUAGE_C 0

#define PG_LANGUAGE_CPP 1

#define PG_LANGUAGE_JAVA 2

typedef enum PgStatus {
  PG_STATUS_OK = 0,
  PG_STATUS_NULL_ARGUMENT = 1,
  PG_STATUS_INVALID_UTF8 = 2,
  PG_STATUS_INVALID_ARGUMENT = 3,
  PG_STATUS_IO = 4,
  PG_STATUS_PARSE = 5,
  PG_STATUS_LEX = 6,
  PG_STATUS_PANIC = 7,
} PgStatus;

/**
 * Pattern store loaded from a JSONL file. Opaque to C.
 */
typedef struct PgPatternStore PgPatternStore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static string; never free it.
 */
const char *pg_version(void);

/**
 * Copy of the last error message on this thread, or NULL if none.
 * Free with [`pg_string_free`].
 */
char *pg_last_error_message(void);

/**
 * # Safety
 * `s` is NULL or a string returned by this library and not yet freed.
 */
void pg_string_free(char *s);

/**
 * Loads a pattern store from a JSONL file.
 *
 * # Safety
 * `path` is a NUL-terminated string; `out` is writable.
 */
enum PgStatus pg_store_open(const char *path, struct PgPatternStore **out);

/**
 * # Safety
 * `store` is NULL or a handle from [`pg_store_open`] not yet freed.
 */
void pg_store_free(struct PgPatternStore *store);

/**
 * Number of patterns; 0 for a NULL handle.
 *
 * # Safety
 * `store` is NULL or a live handle.
 */
size_t pg_store_len(const struct PgPatternStore *store);

/**
 * Patterns for one CWE id as a JSON array, in insertion order.
 *
 * # Safety
 * `store` is a live handle, `cwe_id` a NUL-terminated string, `out_json` writable.
 */
enum PgStatus pg_store_query_cwe(const struct PgPatternStore *store,
                                 const char *cwe_id,
                                 char **out_json);

/**
 * Per-CWE and per-action counts as a JSON object.
 *
 * # Safety
 * `store` is a live handle and `out_json` writable.
 */
enum PgStatus pg_store_stats(const struct PgPatternStore *store, char **out_json);

/**
 * Normalized token sequence of `source`, tokens joined by single spaces.
 *
 * # Safety
 * `source` is a NUL-terminated string and `out` writable.
 */
enum PgStatus pg_normalize_code(const char *source, int32_t language_code, char **out);

/**
 * Whether `candidate` equals `ground_truth` after normalization.
 *
 * # Safety
 * Both strings are NUL-terminated and `out_match` is writable.
 */
enum PgStatus pg_exact_match(const char *candidate,
                             const char *ground_truth,
                             int32_t language_code,
                             bool *out_match);

/**
 * Unified line diff (hunk headers and +/- lines) with `context` lines.
 *
 * # Safety
 * Both strings are NUL-terminated and `out` is writable.
 */
enum PgStatus pg_line_diff(const char *old_text,
                           const char *new_text,
                           uint32_t context,
                           char **out);

/**
 * Ratcliff/Obershelp similarity in [0, 1].
 *
 * # Safety
 * Both strings are NUL-terminated and `out` is writable.
 */
enum PgStatus pg_similarity(const char *a, const char *b, double *out);

/**
 * Cohen's kappa over two label arrays of length `len`.
 *
 * # Safety
 * `labels_a` and `labels_b` point to `len` readable values; `out` is writable.
 */
enum PgStatus pg_cohens_kappa(const int32_t *labels_a,
                              const int32_t *labels_b,
                              size_t len,
                              double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PATCHGUIDE_H */
