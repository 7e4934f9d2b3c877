/* C interface for the randthin calibration and simulation engine. */

#pragma once

/* Generated with cbindgen:0.27.0 */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes returned by every fallible call.
 */
typedef enum RtStatus {
  RT_OK = 0,
  /**
   * Invalid or contradictory input.
   */
  RT_VALIDATION_ERROR = 1,
  /**
   * A numerical routine failed (non-convergence, degenerate column, ...).
   */
  RT_NUMERICAL_ERROR = 2,
  RT_NULL_POINTER = 3,
  RT_INVALID_UTF8 = 4,
  RT_IO_ERROR = 5,
} RtStatus;

/**
 * Portfolio snapshot: names, cumulative default probabilities, spreads.
 */
typedef struct RtSnapshot RtSnapshot;

/**
 * Portfolio tail probabilities per maturity.
 */
typedef struct RtTailCurve RtTailCurve;

/**
 * Calibrated conditional and joint default-time matrices.
 */
typedef struct RtTdMatrixSet RtTdMatrixSet;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (truncated,
 * always NUL-terminated when `len > 0`). Returns the full message length in
 * bytes, excluding the terminator.
 *
 * # Safety
 * `buf` must be NULL or point to at least `len` writable bytes.
 */
size_t rt_last_error_message(char *buf, size_t len);

/**
 * Crate version as a static NUL-terminated string.
 */
const char *rt_version(void);

/**
 * Releases a snapshot handle. Passing NULL is a no-op.
 *
 * # Safety
 * `ptr` must come from this library and not have been freed already.
 */
void rt_snapshot_free(struct RtSnapshot *ptr);

/**
 * Releases a tail-curve handle. Passing NULL is a no-op.
 *
 * # Safety
 * `ptr` must come from this library and not have been freed already.
 */
void rt_tailcurve_free(struct RtTailCurve *ptr);

/**
 * Releases a matrix-set handle. Passing NULL is a no-op.
 *
 * # Safety
 * `ptr` must come from this library and not have been freed already.
 */
void rt_tdmatrixset_free(struct RtTdMatrixSet *ptr);

/**
 * Loads a snapshot file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum RtStatus rt_snapshot_load(const char *path, struct RtSnapshot **out);

/**
 * Number of names, or -1 on a NULL handle.
 *
 * # Safety
 * `ptr` must be a live snapshot handle or NULL.
 */
int32_t rt_snapshot_names(const struct RtSnapshot *ptr);

/**
 * Number of maturity intervals, or -1 on a NULL handle.
 *
 * # Safety
 * `ptr` must be a live snapshot handle or NULL.
 */
int32_t rt_snapshot_intervals(const struct RtSnapshot *ptr);

/**
 * Loads a tail-curve file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum RtStatus rt_tailcurve_load(const char *path, struct RtTailCurve **out);

/**
 * Tail curve of the synthetic birth-process top model with intensity
 * `a + b n` on a grid of `n_maturities` year fractions (strictly increasing,
 * zero excluded).
 *
 * # Safety
 * `maturities` must point to `n_maturities` doubles; `out` must be valid.
 */
enum RtStatus rt_tailcurve_from_birth_model(double a,
                                            double b,
                                            size_t n_names,
                                            const double *maturities,
                                            size_t n_maturities,
                                            struct RtTailCurve **out);

/**
 * Writes a tail curve to a file.
 *
 * # Safety
 * `ptr` must be a live handle, `path` a NUL-terminated string.
 */
enum RtStatus rt_tailcurve_save(const struct RtTailCurve *ptr, const char *path);

/**
 * Rescales the snapshot's forward default probabilities in place so the
 * expected default count matches the tail curve interval by interval.
 *
 * # Safety
 * Both handles must be live.
 */
enum RtStatus rt_enforce_consistency(struct RtSnapshot *snapshot, const struct RtTailCurve *tails);

/**
 * Calibrates TD-matrices with the linear-taper prior. `nbar = 0` selects
 * the default uniformization bound.
 *
 * # Safety
 * Handles must be live and `out` valid.
 */
enum RtStatus rt_calibrate_linear(const struct RtSnapshot *snapshot,
                                  const struct RtTailCurve *tails,
                                  size_t nbar,
                                  size_t max_sweeps,
                                  double tolerance,
                                  struct RtTdMatrixSet **out);

/**
 * Loads a TD-matrix set written by the CLI or `rt_tdmatrixset_save`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum RtStatus rt_tdmatrixset_load(const char *path, struct RtTdMatrixSet **out);

/**
 * Writes a TD-matrix set to a file.
 *
 * # Safety
 * `ptr` must be a live handle, `path` a NUL-terminated string.
 */
enum RtStatus rt_tdmatrixset_save(const struct RtTdMatrixSet *ptr, const char *path);

/**
 * Number of names, or -1 on a NULL handle.
 *
 * # Safety
 * `ptr` must be a live handle or NULL.
 */
int32_t rt_tdmatrixset_names(const struct RtTdMatrixSet *ptr);

/**
 * Number of maturity intervals, or -1 on a NULL handle.
 *
 * # Safety
 * `ptr` must be a live handle or NULL.
 */
int32_t rt_tdmatrixset_intervals(const struct RtTdMatrixSet *ptr);

/**
 * Copies the conditional matrix of `interval` (1-based) into `buf`
 * (row-major, `len >= N*N`).
 *
 * # Safety
 * `ptr` must be a live handle; `buf` must point to `len` doubles.
 */
enum RtStatus rt_tdmatrixset_conditional(const struct RtTdMatrixSet *ptr,
                                         size_t interval,
                                         double *buf,
                                         size_t len);

/**
 * Single-name tranche deltas on the first maturity interval. `strikes`
 * holds the full ladder `0 = K0 < ... < K(n_strikes-1) = 1` and
 * `tranche_spreads` one running spread per tranche. The output buffer is
 * N x (n_strikes - 1) row-major; undefined (riskless-name) deltas are NaN.
 * `refined != 0` applies the premium-leg correction.
 *
 * # Safety
 * All pointers must be valid for the documented lengths.
 */
enum RtStatus rt_single_name_deltas(const struct RtTdMatrixSet *set,
                                    const struct RtSnapshot *snapshot,
                                    const double *strikes,
                                    size_t n_strikes,
                                    const double *tranche_spreads,
                                    double rate,
                                    int32_t refined,
                                    double *buf,
                                    size_t len);

/**
 * Marks an `n x n` spread-return covariance (row-major) against the
 * next-to-default probabilities `pi`: subtracts the squared portfolio
 * volatility, then alternates orthogonal and positive-semidefinite
 * projections. Writes the marked matrix into `out_r` (row-major, `n*n`)
 * and, when the pointers are non-NULL, the membership residuals and
 * iteration count.
 *
 * # Safety
 * Buffers must match the documented sizes.
 */
enum RtStatus rt_mark_covariance(const double *cov,
                                 const double *pi,
                                 size_t n,
                                 double sigma_y,
                                 size_t max_iter,
                                 double tol,
                                 double *out_r,
                                 double *out_orth_residual,
                                 double *out_min_eigenvalue,
                                 int32_t *out_iterations);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus
