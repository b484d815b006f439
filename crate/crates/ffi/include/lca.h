#ifndef LCA_H
#define LCA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result codes.
 */
typedef enum LcaStatus {
  LCA_STATUS_OK = 0,
  LCA_STATUS_NULL_ARGUMENT = 1,
  LCA_STATUS_INVALID_UTF8 = 2,
  LCA_STATUS_CONFIG = 3,
  LCA_STATUS_NUMERIC = 4,
  LCA_STATUS_DATA = 5,
  LCA_STATUS_FORMAT = 6,
  LCA_STATUS_INTEGRITY = 7,
  LCA_STATUS_RANGE = 8,
  LCA_STATUS_CONTRACT = 9,
  LCA_STATUS_GATE = 10,
  LCA_STATUS_IO = 11,
  LCA_STATUS_BUFFER_TOO_SMALL = 12,
  LCA_STATUS_PANIC = 13,
} LcaStatus;

/*
 Opaque handle to a loaded LCA matrix and its sidecar.
 */
typedef struct LcaAllocation LcaAllocation;

/*
 Opaque trajectory handle.
 */
typedef struct LcaTrajectory LcaTrajectory;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Length in bytes of the calling thread's last error message (no NUL).
 */
size_t lca_last_error_length(void);

/*
 Copy the last error message into `buf` as a NUL-terminated string,
 truncated to `len - 1` bytes.  Returns the number of bytes copied.

 # Safety
 `buf` must be valid for `len` bytes or null.
 */
size_t lca_last_error_message(char *buf, size_t len);

/*
 Library version as a static NUL-terminated string.
 */
const char *lca_version(void);

/*
 Open and verify a trajectory file.

 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum LcaStatus lca_trajectory_open(const char *path, struct LcaTrajectory **out);

/*
 # Safety
 `h` must come from [`lca_trajectory_open`] and not be used afterwards.
 */
void lca_trajectory_free(struct LcaTrajectory *h);

/*
 Number of steps T (snapshots are 0..=T) and parameters K.

 # Safety
 `h` must be a live handle; `steps` and `params` must be writable.
 */
enum LcaStatus lca_trajectory_shape(const struct LcaTrajectory *h, size_t *steps, size_t *params);

/*
 Copy snapshot θ_t into `buf` (`len` ≥ K).

 # Safety
 `h` must be a live handle; `buf` must be valid for `len` doubles.
 */
enum LcaStatus lca_trajectory_snapshot(const struct LcaTrajectory *h,
                                       size_t t,
                                       double *buf,
                                       size_t len);

/*
 Load an LCA matrix file together with its `.layout.json` sidecar.

 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum LcaStatus lca_allocation_open(const char *path, struct LcaAllocation **out);

/*
 # Safety
 `h` must come from [`lca_allocation_open`] and not be used afterwards.
 */
void lca_allocation_free(struct LcaAllocation *h);

/*
 Steps T, parameters K and dense layers L.

 # Safety
 `h` must be a live handle; the outputs must be writable.
 */
enum LcaStatus lca_allocation_shape(const struct LcaAllocation *h,
                                    size_t *steps,
                                    size_t *params,
                                    size_t *layers);

/*
 Copy row A[t, ·] into `buf` (`len` ≥ K).

 # Safety
 `h` must be a live handle; `buf` must be valid for `len` doubles.
 */
enum LcaStatus lca_allocation_row(const struct LcaAllocation *h, size_t t, double *buf, size_t len);

/*
 Copy the per-iteration residuals ε_t into `buf` (`len` ≥ T).

 # Safety
 `h` must be a live handle; `buf` must be valid for `len` doubles.
 */
enum LcaStatus lca_allocation_residuals(const struct LcaAllocation *h, double *buf, size_t len);

/*
 Copy the total LCA of each dense layer into `buf` (`len` ≥ L).

 # Safety
 `h` must be a live handle; `buf` must be valid for `len` doubles.
 */
enum LcaStatus lca_allocation_layer_totals(const struct LcaAllocation *h, double *buf, size_t len);

/*
 Loss change L(θ_T) − L(θ_0) and cumulative error in percent.

 # Safety
 `h` must be a live handle; the outputs must be writable.
 */
enum LcaStatus lca_allocation_error(const struct LcaAllocation *h,
                                    double *loss_change,
                                    double *cumulative_error_pct);

/*
 Train and integrate the run described by a TOML configuration file,
 writing artifacts under its output directory.  Returns
 [`LcaStatus::Gate`] when the cumulative error gate fails (artifacts are
 still written).

 # Safety
 `config_path` must be a NUL-terminated string.
 */
enum LcaStatus lca_run_pipeline(const char *config_path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LCA_H */
