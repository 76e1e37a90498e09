#ifndef GRPLASSO_TE_H
#define GRPLASSO_TE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Penalty level rule for [`GteFitOptions::lambda_mode`].
 */
typedef enum {
  GTE_LAMBDA_MODE_FORMULA = 0,
  GTE_LAMBDA_MODE_ITERATIVE = 1,
  GTE_LAMBDA_MODE_CROSS_VALIDATION = 2,
} GteLambdaMode;

/**
 * Result codes.
 */
typedef enum {
  GTE_STATUS_OK = 0,
  GTE_STATUS_NULL_POINTER = 1,
  GTE_STATUS_INVALID_ARGUMENT = 2,
  GTE_STATUS_DATA_ERROR = 3,
  GTE_STATUS_NUMERICAL_ERROR = 4,
  GTE_STATUS_BUFFER_TOO_SMALL = 5,
  GTE_STATUS_PANIC = 6,
} GteStatus;

/**
 * Observational data: outcome, dense treatment levels and covariates.
 */
typedef struct GteDataset GteDataset;

/**
 * Standardized design built from a dataset.
 */
typedef struct GteDesign GteDesign;

/**
 * Fitted nuisance models.
 */
typedef struct GteNuisance GteNuisance;

/**
 * Options for [`gte_fit_nuisances`]; start from [`gte_fit_options_default`].
 */
typedef struct {
  GteLambdaMode lambda_mode;
  double delta_d;
  double delta_y;
  /**
   * Noise scale for formula mode; nonpositive means estimate it.
   */
  double u_max;
  uint32_t cv_folds;
  uint64_t seed;
  double floor;
  bool use_union;
} GteFitOptions;

typedef struct {
  double estimate;
  double std_error;
  double lower;
  double upper;
} GteInterval;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *gte_version(void);

/**
 * Copy the last error message of this thread into `buf` (NUL-terminated).
 *
 * Returns the message length excluding the terminator, 0 when there is no
 * error. When `buf` is null or `len` is too small nothing is copied, so the
 * return value can size a buffer.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t gte_last_error_message(char *buf, size_t len);

/**
 * Build a dataset from outcomes `y`, treatment levels `d` dense in `0..=T`
 * and row-major covariates `x` of shape `n × k`.
 * Covariates are named `x1..xk`.
 *
 * # Safety
 * `y` and `d` must point to `n` readable values, `x` to `n*k` values (may be
 * null when `k == 0`), and `out` to writable storage for one pointer.
 */
GteStatus gte_dataset_new(const double *y,
                          const uint32_t *d,
                          const double *x,
                          size_t n,
                          size_t k,
                          GteDataset **out);

/**
 * Load a CSV with a header row.
 *
 * # Safety
 * String arguments must be valid NUL-terminated strings; `out` must be writable.
 */
GteStatus gte_dataset_load_csv(const char *path,
                               const char *outcome,
                               const char *treatment,
                               GteDataset **out);

/**
 * # Safety
 * `ds` must be null or a handle from this library not yet freed.
 */
void gte_dataset_free(GteDataset *ds);

/**
 * Number of units, 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t gte_dataset_n(const GteDataset *ds);

/**
 * Number of treatment levels `T + 1`, 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t gte_dataset_n_levels(const GteDataset *ds);

/**
 * Standardized design: intercept plus every covariate when `spec` is null,
 * otherwise the expansion rules in `spec` (lines of `key = value`).
 *
 * # Safety
 * `ds` must be a live handle, `spec` null or a NUL-terminated string, `out` writable.
 */
GteStatus gte_design_new(const GteDataset *ds, const char *spec, GteDesign **out);

/**
 * # Safety
 * `dm` must be null or a handle from this library not yet freed.
 */
void gte_design_free(GteDesign *dm);

/**
 * Design width including the intercept, 0 for a null handle.
 *
 * # Safety
 * `dm` must be null or a live handle.
 */
size_t gte_design_p(const GteDesign *dm);

GteFitOptions gte_fit_options_default(void);

/**
 * Fit both nuisance models. `options` may be null for the defaults.
 *
 * # Safety
 * `ds` and `dm` must be live handles built from the same data, `options`
 * null or readable, `out` writable.
 */
GteStatus gte_fit_nuisances(const GteDataset *ds,
                            const GteDesign *dm,
                            const GteFitOptions *options,
                            GteNuisance **out);

/**
 * # Safety
 * `fit` must be null or a handle from this library not yet freed.
 */
void gte_nuisance_free(GteNuisance *fit);

/**
 * Penalty levels and selection sizes of a fit. Any output pointer may be null.
 *
 * # Safety
 * `fit` must be a live handle; non-null outputs must be writable.
 */
GteStatus gte_nuisance_summary(const GteNuisance *fit,
                               double *lambda_d,
                               double *lambda_y,
                               size_t *selected_d,
                               size_t *selected_y,
                               bool *converged);

/**
 * Doubly-robust dose-response means; writes `T + 1` values to `mu`.
 *
 * # Safety
 * Handles must be live; `mu` must point to `len` writable doubles.
 */
GteStatus gte_dose_response(const GteDataset *ds, const GteNuisance *fit, double *mu, size_t len);

/**
 * Confidence interval for a dose-response contrast such as `mu1-mu0`
 * (`att == false`) or an effect-on-treated contrast such as `tau1`
 * (`att == true`).
 *
 * # Safety
 * Handles must be live, `contrast` a NUL-terminated string, `out` writable.
 */
GteStatus gte_effect_interval(const GteDataset *ds,
                              const GteNuisance *fit,
                              const char *contrast,
                              bool att,
                              double alpha,
                              GteInterval *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GRPLASSO_TE_H */
