#ifndef HELIX_H
#define HELIX_H

/* Generated from the Rust sources; edit those instead. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every API call. Mirrors the CLI exit codes: 0 success,
 * 1 bad arguments, 2 unusable data or files, 3 numeric failure.
 */
typedef enum HelixStatus {
  HELIX_STATUS_OK = 0,
  HELIX_STATUS_USAGE = 1,
  HELIX_STATUS_DATA = 2,
  HELIX_STATUS_NUMERIC = 3,
} HelixStatus;

/**
 * Opaque trained-model handle. Create with `helix_load_checkpoint`,
 * release with `helix_free`. A handle is immutable and may be shared
 * across threads.
 */
typedef struct HelixHandle HelixHandle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Returns the library version as a static NUL-terminated string.
 */
const char *helix_version(void);

/**
 * Returns the message behind the most recent failure on this thread, or
 * an empty string when nothing has failed. The pointer stays valid until
 * the next failing call on the same thread.
 */
const char *helix_last_error(void);

/**
 * Opens a checkpoint file written by `helix train`.
 *
 * On success writes a handle to `out` and returns `Ok`; the caller owns
 * the handle and must release it with `helix_free`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum HelixStatus helix_load_checkpoint(const char *path, struct HelixHandle **out);

/**
 * Number of features (columns) the loaded model expects.
 *
 * # Safety
 * `handle` must be a live pointer from `helix_load_checkpoint`.
 */
size_t helix_n_features(const struct HelixHandle *handle);

/**
 * Window length the model was trained with. Series passed to
 * `helix_impute` should be at least this long.
 *
 * # Safety
 * `handle` must be a live pointer from `helix_load_checkpoint`.
 */
size_t helix_t_window(const struct HelixHandle *handle);

/**
 * Fills the missing entries of a series.
 *
 * `values` and `out` are `t_len * n_features` doubles, row-major with
 * time leading; `mask` holds one byte per entry, 1 observed, 0 missing.
 * Observed entries are copied through unchanged; missing entries receive
 * model predictions on the original data scale. `out` may alias `values`.
 *
 * # Safety
 * `handle` must be live, and the three buffers must match the stated
 * sizes.
 */
enum HelixStatus helix_impute(const struct HelixHandle *handle,
                              const double *values,
                              const uint8_t *mask,
                              size_t t_len,
                              size_t n_features,
                              double *out);

/**
 * Releases a handle. Passing null is a no-op.
 *
 * # Safety
 * `handle` must come from `helix_load_checkpoint` and must not be used
 * afterwards.
 */
void helix_free(struct HelixHandle *handle);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HELIX_H */
