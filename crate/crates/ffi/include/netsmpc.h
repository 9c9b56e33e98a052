#ifndef NETSMPC_H
#define NETSMPC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of a call. Nonzero values match the command line exit codes.
 */
typedef enum NetsmpcStatus {
  NETSMPC_STATUS_OK = 0,
  NETSMPC_STATUS_CONFIG = 2,
  NETSMPC_STATUS_ASSUMPTION = 3,
  NETSMPC_STATUS_SOLVER = 4,
  NETSMPC_STATUS_IO = 5,
  NETSMPC_STATUS_INTERNAL = 6,
  NETSMPC_STATUS_NULL_ARGUMENT = 7,
  NETSMPC_STATUS_PANIC = 8,
} NetsmpcStatus;

/**
 * Results of one ensemble run.
 */
typedef struct NetsmpcEnsemble NetsmpcEnsemble;

/**
 * Configured experiment with its moments loaded.
 */
typedef struct NetsmpcExperiment NetsmpcExperiment;

/**
 * Summary of an ensemble run.
 */
typedef struct NetsmpcSummary {
  size_t paths;
  size_t steps;
  double msb;
  double msb_stderr;
  size_t msb_argmax;
  double input_peak;
  size_t windows;
  size_t infeasible_windows;
  size_t aborted_paths;
} NetsmpcSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or null. The pointer
 * stays valid until the next call on the same thread.
 */
const char *netsmpc_last_error(void);

/**
 * Library version as a static string.
 */
const char *netsmpc_version(void);

/**
 * Build an experiment from TOML text, or from the bundled benchmark when
 * `toml` is null. `cache_dir` selects the moment cache; null keeps moments in
 * memory. `base_dir` resolves relative paths in the file and may be null.
 *
 * # Safety
 * String arguments must be null or NUL-terminated; `out` must be writable.
 */
enum NetsmpcStatus netsmpc_experiment_new(const char *toml,
                                          const char *base_dir,
                                          const char *cache_dir,
                                          struct NetsmpcExperiment **out);

/**
 * Override path count, step count and master seed. Zero leaves a value unchanged.
 *
 * # Safety
 * `exp` must come from [`netsmpc_experiment_new`].
 */
enum NetsmpcStatus netsmpc_experiment_set_run(struct NetsmpcExperiment *exp,
                                              size_t paths,
                                              size_t steps,
                                              uint64_t seed);

/**
 * # Safety
 * `exp` must be null or come from [`netsmpc_experiment_new`], and not be used afterwards.
 */
void netsmpc_experiment_free(struct NetsmpcExperiment *exp);

/**
 * Simulate all paths of the experiment.
 *
 * # Safety
 * `exp` must be a live handle; `out` must be writable.
 */
enum NetsmpcStatus netsmpc_run(const struct NetsmpcExperiment *exp, struct NetsmpcEnsemble **out);

/**
 * # Safety
 * `ens` must be a live handle; `out` must be writable.
 */
enum NetsmpcStatus netsmpc_ensemble_summary(const struct NetsmpcEnsemble *ens,
                                            struct NetsmpcSummary *out);

/**
 * Copy the cross-path mean of `‖eᴼ_t‖²` into `buf`, up to `len` entries.
 * `written` receives the number of steps available.
 *
 * # Safety
 * `buf` must hold `len` doubles; `written` must be writable.
 */
enum NetsmpcStatus netsmpc_ensemble_msb_curve(const struct NetsmpcEnsemble *ens,
                                              double *buf,
                                              size_t len,
                                              size_t *written);

/**
 * Write `trace.csv` and `ensemble.csv` into `dir`.
 *
 * # Safety
 * `ens` must be a live handle; `dir` a NUL-terminated path.
 */
enum NetsmpcStatus netsmpc_ensemble_write_csv(const struct NetsmpcEnsemble *ens, const char *dir);

/**
 * # Safety
 * `ens` must be null or a live handle, and not be used afterwards.
 */
void netsmpc_ensemble_free(struct NetsmpcEnsemble *ens);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NETSMPC_H */
