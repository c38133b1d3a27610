#ifndef LEAP_FFI_H
#define LEAP_FFI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LeapStatus {
  LEAP_STATUS_OK = 0,
  LEAP_STATUS_NULL_POINTER = 1,
  LEAP_STATUS_DIMENSION = 2,
  LEAP_STATUS_INPUT = 3,
  LEAP_STATUS_USAGE = 4,
  LEAP_STATUS_CONFIG = 5,
  LEAP_STATUS_FORMAT = 6,
  LEAP_STATUS_NON_FINITE = 7,
  LEAP_STATUS_NOT_CONVERGED = 8,
  LEAP_STATUS_IO = 9,
  LEAP_STATUS_JSON = 10,
  LEAP_STATUS_PANIC = 11,
} LeapStatus;

/**
 * A loaded checkpoint.
 */
typedef struct LeapCheckpoint LeapCheckpoint;

/**
 * Learnable thresholds and the target-ratio penalty settings.
 */
typedef struct LeapThresholdBank LeapThresholdBank;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *leap_last_error_message(void);

/**
 * Top-K block mask of a row-major `rows x cols` score matrix into `out_mask`
 * (one byte per entry, 0 or 1).
 *
 * # Safety
 * `scores` and `out_mask` must each hold `rows * cols` elements.
 */
enum LeapStatus leap_topk_mask(const double *scores,
                               size_t rows,
                               size_t cols,
                               double keep_fraction,
                               uint8_t *out_mask);

/**
 * Cubic sparsity at step `t`.
 *
 * # Safety
 * `out` must point to a writable `double`.
 */
enum LeapStatus leap_cubic_sparsity(double t,
                                    double s0,
                                    double sf,
                                    uint64_t t0,
                                    uint64_t tc,
                                    uint64_t tf,
                                    double *out);

/**
 * New bank with every threshold at five times the temperature.
 *
 * # Safety
 * `element_counts` must hold `len` values and `out` must be writable.
 */
enum LeapStatus leap_threshold_bank_new(const size_t *element_counts,
                                        size_t len,
                                        double temperature,
                                        double target_density,
                                        double lambda_max,
                                        double lambda_min,
                                        struct LeapThresholdBank **out);

/**
 * # Safety
 * `bank` must be null or a handle from [`leap_threshold_bank_new`] not yet freed.
 */
void leap_threshold_bank_free(struct LeapThresholdBank *bank);

/**
 * Number of thresholds in the bank.
 *
 * # Safety
 * `bank` must be a live handle and `out` writable.
 */
enum LeapStatus leap_threshold_bank_len(const struct LeapThresholdBank *bank, size_t *out);

/**
 * Replace all thresholds; `len` must equal the bank length.
 *
 * # Safety
 * `bank` must be a live handle and `sigma` hold `len` values.
 */
enum LeapStatus leap_threshold_bank_set_sigma(struct LeapThresholdBank *bank,
                                              const double *sigma,
                                              size_t len);

/**
 * Per-matrix keep fractions `sigmoid(σ_i / T)` into `out` (`len` slots).
 *
 * # Safety
 * `bank` must be a live handle and `out` hold `len` writable values.
 */
enum LeapStatus leap_threshold_bank_densities(const struct LeapThresholdBank *bank,
                                              double *out,
                                              size_t len);

/**
 * Count-weighted remaining ratio.
 *
 * # Safety
 * `bank` must be a live handle and `out` writable.
 */
enum LeapStatus leap_threshold_bank_remaining_ratio(const struct LeapThresholdBank *bank,
                                                    double *out);

/**
 * One-sided squared excess of the remaining ratio over the target.
 *
 * # Safety
 * `bank` must be a live handle and `out` writable.
 */
enum LeapStatus leap_threshold_bank_reg_loss(const struct LeapThresholdBank *bank, double *out);

/**
 * Adaptive regularization coefficient at the current thresholds.
 *
 * # Safety
 * `bank` must be a live handle and `out` writable.
 */
enum LeapStatus leap_threshold_bank_adaptive_lambda(const struct LeapThresholdBank *bank,
                                                    double *out);

/**
 * # Safety
 * `path` must be a nul-terminated string and `out` writable.
 */
enum LeapStatus leap_checkpoint_open(const char *path, struct LeapCheckpoint **out);

/**
 * # Safety
 * `checkpoint` must be null or a handle from [`leap_checkpoint_open`] not yet freed.
 */
void leap_checkpoint_free(struct LeapCheckpoint *checkpoint);

/**
 * Number of prunable matrices.
 *
 * # Safety
 * `checkpoint` must be a live handle and `out` writable.
 */
enum LeapStatus leap_checkpoint_matrix_count(const struct LeapCheckpoint *checkpoint, size_t *out);

/**
 * Per-matrix densities (keep fractions when the checkpoint has thresholds,
 * mask densities otherwise) into `out` (`len` slots).
 *
 * # Safety
 * `checkpoint` must be a live handle and `out` hold `len` writable values.
 */
enum LeapStatus leap_checkpoint_densities(const struct LeapCheckpoint *checkpoint,
                                          double *out,
                                          size_t len);

/**
 * Run one training from a JSON config, writing outputs to its `out_dir`. On
 * success `*out_summary` receives the summary as JSON, to be released with
 * [`leap_string_free`].
 *
 * # Safety
 * `config_json` must be a nul-terminated string and `out_summary` writable.
 */
enum LeapStatus leap_train_json(const char *config_json, char **out_summary);

/**
 * # Safety
 * `s` must be null or a string returned by this library, not yet freed.
 */
void leap_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LEAP_FFI_H */
