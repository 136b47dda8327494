#ifndef CHATWATCH_H
#define CHATWATCH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Label codes written by scoring and lookup functions.
 */
#define CW_LABEL_NORMAL 0

#define CW_LABEL_TROLL 1

/**
 * The user has not been scored yet.
 */
#define CW_LABEL_UNKNOWN -1

/**
 * Number of features per row expected by [`cw_score`].
 */
#define CW_N_FEATURES 10

typedef enum {
  CW_MESSAGE_KIND_BUTTON = 0,
  CW_MESSAGE_KIND_MODE_VOTE = 1,
  CW_MESSAGE_KIND_SPAM = 2,
} CwMessageKind;

typedef enum {
  CW_METHOD_DKNN = 0,
  CW_METHOD_SKNN = 1,
  CW_METHOD_KMEANS = 2,
} CwMethod;

/**
 * Result codes.
 */
typedef enum {
  CW_STATUS_OK = 0,
  CW_STATUS_NULL_POINTER = 1,
  CW_STATUS_INVALID_UTF8 = 2,
  CW_STATUS_INVALID_ARGUMENT = 3,
  CW_STATUS_PARSE_ERROR = 4,
  CW_STATUS_POPULATION_TOO_SMALL = 5,
  CW_STATUS_ENGINE_FINISHED = 6,
  CW_STATUS_PANIC = 7,
} CwStatus;

/**
 * Streaming engine. Re-clustering runs synchronously inside the call that
 * crosses a boundary; results are queued as JSON lines for [`cw_engine_poll`].
 */
typedef struct CwEngine CwEngine;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Last error message for this thread, or null. Owned by the library.
 */
const char *cw_last_error(void);

/**
 * Library version as a static string.
 */
const char *cw_version(void);

/**
 * Release a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void cw_string_free(char *s);

/**
 * Classify a chat message.
 *
 * `out_index` receives the button index (a, b, down, left, right, select,
 * start, up), the mode (0 anarchy, 1 democracy) or -1 for spam.
 *
 * # Safety
 * `msg` must be a NUL-terminated string; the out pointers must be writable.
 */
CwStatus cw_classify_message(const char *msg, CwMessageKind *out_kind, int32_t *out_index);

/**
 * Parse one log line and report its timestamp in epoch milliseconds.
 *
 * # Safety
 * `line` must be a NUL-terminated string; `out_timestamp_ms` writable.
 */
CwStatus cw_parse_line(const char *line, int64_t *out_timestamp_ms);

/**
 * Score `n_rows` feature rows stored row-major, [`CW_N_FEATURES`] values each.
 *
 * Each output array holds `n_rows` entries; any of them may be null.
 * `k` is ignored for k-means.
 *
 * # Safety
 * `rows` must point to `n_rows * CW_N_FEATURES` doubles; non-null outputs
 * must have room for `n_rows` values.
 */
CwStatus cw_score(const double *rows,
                  size_t n_rows,
                  CwMethod method,
                  size_t k,
                  double threshold,
                  double *out_raw,
                  double *out_scores,
                  int32_t *out_labels);

/**
 * Create an engine. `config_toml` may be null for defaults.
 *
 * # Safety
 * `config_toml` must be null or NUL-terminated; `out` must be writable.
 */
CwStatus cw_engine_new(const char *config_toml, CwEngine **out);

/**
 * Destroy an engine. Null is ignored.
 *
 * # Safety
 * `engine` must come from [`cw_engine_new`] and not have been freed.
 */
void cw_engine_free(CwEngine *engine);

/**
 * Feed one raw log line. Malformed lines are counted, not rejected.
 *
 * # Safety
 * `engine` must be valid; `line` NUL-terminated.
 */
CwStatus cw_engine_push_line(CwEngine *engine, const char *line);

/**
 * Close windows that ended before `now_ms`.
 *
 * # Safety
 * `engine` must be valid.
 */
CwStatus cw_engine_advance_clock(CwEngine *engine, int64_t now_ms);

/**
 * Flush the open window, run the final re-cluster and queue parse stats.
 *
 * # Safety
 * `engine` must be valid.
 */
CwStatus cw_engine_finish(CwEngine *engine);

/**
 * Pop the next queued event as a JSON string, or null when none is queued.
 *
 * # Safety
 * `engine` must be valid; `out_json` writable. Free the result with
 * [`cw_string_free`].
 */
CwStatus cw_engine_poll(CwEngine *engine, char **out_json);

/**
 * Latest published label of `username`, or [`CW_LABEL_UNKNOWN`].
 *
 * # Safety
 * `engine` must be valid; `username` NUL-terminated; `out_label` writable.
 */
CwStatus cw_engine_label(CwEngine *engine, const char *username, int32_t *out_label);

/**
 * Number of completed re-clustering epochs.
 *
 * # Safety
 * `engine` must be valid; `out_epoch` writable.
 */
CwStatus cw_engine_epoch(CwEngine *engine, uint64_t *out_epoch);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CHATWATCH_H */
