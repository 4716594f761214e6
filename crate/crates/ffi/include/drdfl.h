#ifndef DRDFL_H
#define DRDFL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DrdflStatus {
  DRDFL_STATUS_OK = 0,
  DRDFL_STATUS_NULL_POINTER = 1,
  DRDFL_STATUS_INVALID_UTF8 = 2,
  /**
   * Bad configuration, argument, file format or shape.
   */
  DRDFL_STATUS_CONFIG = 3,
  DRDFL_STATUS_DOMAIN = 4,
  DRDFL_STATUS_IO = 5,
  DRDFL_STATUS_OPTIMIZATION = 6,
  /**
   * Training diverged; no checkpoint is returned across the boundary.
   */
  DRDFL_STATUS_DIVERGED = 7,
  DRDFL_STATUS_BUFFER_TOO_SMALL = 8,
  DRDFL_STATUS_PANIC = 9,
  /**
   * Regret is undefined because the oracle reward is not positive.
   */
  DRDFL_STATUS_UNDEFINED = 10,
} DrdflStatus;

/**
 * Opaque workload dataset.
 */
typedef struct DrdflDataset DrdflDataset;

/**
 * Opaque diffusion model.
 */
typedef struct DrdflDiffusion DrdflDiffusion;

/**
 * Opaque trained predictor.
 */
typedef struct DrdflPredictor DrdflPredictor;

/**
 * Mirror of the provisioning constants.
 */
typedef struct DrdflProvisioningParams {
  double a;
  double b;
  double gamma;
  double omega;
  double p_act;
  double p_idle;
  double a_min;
  double a_max;
  size_t n_slots;
} DrdflProvisioningParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *drdfl_version(void);

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len`) and returns the full message length in
 * bytes, excluding the terminator. Returns 0 when there is no error.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t drdfl_last_error_message(char *buf, size_t len);

/**
 * Writes the default provisioning constants to `out`.
 *
 * # Safety
 * `out` must be null or valid for writes.
 */
enum DrdflStatus drdfl_params_default(struct DrdflProvisioningParams *out);

/**
 * Per-slot optimal capacities for predicted workloads `c_hat[0..n]`.
 *
 * # Safety
 * `c_hat` and `out` must point to `n` readable / writable doubles.
 */
enum DrdflStatus drdfl_optimal_decision(const struct DrdflProvisioningParams *params,
                                        const double *c_hat,
                                        size_t n,
                                        double *out);

/**
 * Net reward of capacities `a` against workloads `c`, both of length `n`.
 *
 * # Safety
 * `a` and `c` must point to `n` readable doubles; `out` must be writable.
 */
enum DrdflStatus drdfl_net_reward(const struct DrdflProvisioningParams *params,
                                  const double *a,
                                  const double *c,
                                  size_t n,
                                  double *out);

/**
 * Oracle reward of workloads `c[0..n]`.
 *
 * # Safety
 * `c` must point to `n` readable doubles; `out` must be writable.
 */
enum DrdflStatus drdfl_oracle_reward(const struct DrdflProvisioningParams *params,
                                     const double *c,
                                     size_t n,
                                     double *out);

/**
 * Loads a dataset file written by the library or the CLI.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum DrdflStatus drdfl_dataset_load(const char *path, struct DrdflDataset **out);

/**
 * Generates `count` synthetic sequences of the named kind (`ar1`,
 * `seasonal`, `bursty`) with default generator settings.
 *
 * # Safety
 * `kind` must be a NUL-terminated string; `out` must be writable.
 */
enum DrdflStatus drdfl_dataset_synth(const char *kind,
                                     size_t count,
                                     uint64_t seed,
                                     struct DrdflDataset **out);

/**
 * Writes the dataset to `path`.
 *
 * # Safety
 * `d` must be a live handle; `path` a NUL-terminated string.
 */
enum DrdflStatus drdfl_dataset_save(const struct DrdflDataset *d, const char *path);

/**
 * Number of sequences and their length.
 *
 * # Safety
 * `d` must be a live handle; outputs must be writable.
 */
enum DrdflStatus drdfl_dataset_shape(const struct DrdflDataset *d, size_t *count, size_t *seq_len);

/**
 * Copies sequence `index` into `out[0..len]`; `len` must equal the sequence
 * length.
 *
 * # Safety
 * `d` must be a live handle; `out` must point to `len` writable doubles.
 */
enum DrdflStatus drdfl_dataset_sequence(const struct DrdflDataset *d,
                                        size_t index,
                                        double *out,
                                        size_t len);

/**
 * Releases a dataset handle. Null is ignored.
 *
 * # Safety
 * `d` must be null or a handle not yet freed.
 */
void drdfl_dataset_free(struct DrdflDataset *d);

/**
 * Loads a predictor checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum DrdflStatus drdfl_predictor_load(const char *path, struct DrdflPredictor **out);

/**
 * Context and horizon lengths of a predictor.
 *
 * # Safety
 * `p` must be a live handle; outputs must be writable.
 */
enum DrdflStatus drdfl_predictor_shape(const struct DrdflPredictor *p,
                                       size_t *context,
                                       size_t *horizon);

/**
 * Forecasts `horizon` workloads from `context` past values.
 *
 * # Safety
 * `p` must be a live handle; `ctx` must hold `ctx_len` doubles and `out`
 * `out_len` writable doubles.
 */
enum DrdflStatus drdfl_predictor_predict(const struct DrdflPredictor *p,
                                         const double *ctx,
                                         size_t ctx_len,
                                         double *out,
                                         size_t out_len);

/**
 * Normalized regret of the predictor's decisions on a dataset.
 *
 * # Safety
 * Handles must be live; `params` readable; `out` writable.
 */
enum DrdflStatus drdfl_evaluate_regret(const struct DrdflPredictor *p,
                                       const struct DrdflDataset *d,
                                       const struct DrdflProvisioningParams *params,
                                       double *out);

/**
 * Releases a predictor handle. Null is ignored.
 *
 * # Safety
 * `p` must be null or a handle not yet freed.
 */
void drdfl_predictor_free(struct DrdflPredictor *p);

/**
 * Loads a diffusion checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum DrdflStatus drdfl_diffusion_load(const char *path, struct DrdflDiffusion **out);

/**
 * Draws `count` sequences from the model into a new dataset whose context
 * length is `context`.
 *
 * # Safety
 * `m` must be a live handle; `out` must be writable.
 */
enum DrdflStatus drdfl_diffusion_sample(const struct DrdflDiffusion *m,
                                        size_t count,
                                        size_t context,
                                        uint64_t seed,
                                        struct DrdflDataset **out);

/**
 * Releases a diffusion handle. Null is ignored.
 *
 * # Safety
 * `m` must be null or a handle not yet freed.
 */
void drdfl_diffusion_free(struct DrdflDiffusion *m);

/**
 * Runs the experiment described by a TOML file. `output_dir` may be null
 * to keep the configured directory. The mean regret of the first test set
 * is written to `mean_regret` when that pointer is non-null and the value
 * is defined.
 *
 * # Safety
 * String arguments must be NUL-terminated; `mean_regret` null or writable.
 */
enum DrdflStatus drdfl_run_experiment(const char *config_path,
                                      const char *output_dir,
                                      double *mean_regret);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DRDFL_H */
