#ifndef MISMATCH_LAB_H
#define MISMATCH_LAB_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum MlStatus {
  ML_STATUS_OK = 0,
  ML_STATUS_NULL_POINTER = 1,
  ML_STATUS_INVALID_UTF8 = 2,
  ML_STATUS_INVALID_CONFIG = 3,
  ML_STATUS_NUMERIC = 4,
  ML_STATUS_CONTRACT = 5,
  ML_STATUS_EMPTY_BATCH = 6,
  ML_STATUS_BUDGET_EXCEEDED = 7,
  ML_STATUS_UNKNOWN_SUITE = 8,
  ML_STATUS_IO = 9,
  /**
   * The surge detector has not fired yet.
   */
  ML_STATUS_NOT_TRIGGERED = 10,
  /**
   * A Rust panic was caught at the boundary.
   */
  ML_STATUS_PANIC = 11,
  ML_STATUS_VERIFICATION_FAILED = 12,
} MlStatus;

/**
 * Length-triggered learning-rate scheduler.
 */
typedef struct MlScheduler MlScheduler;

/**
 * Response-length surge detector.
 */
typedef struct MlSurgeDetector MlSurgeDetector;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty if none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *ml_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ml_version(void);

/**
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void ml_string_free(char *s);

/**
 * Fixed-period scheduler: halves every `t_decay` steps, floored at `eta_inf`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum MlStatus ml_scheduler_new_fixed(double eta_0,
                                     double eta_inf,
                                     uint64_t t_decay,
                                     struct MlScheduler **out);

/**
 * Adaptive scheduler, armed later with [`ml_scheduler_arm`].
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum MlStatus ml_scheduler_new_adaptive(double eta_0,
                                        double eta_inf,
                                        double heuristic_factor,
                                        struct MlScheduler **out);

/**
 * Moves to step `t` (the next step) and writes the learning rate.
 *
 * # Safety
 * `handle` and `lr` must be valid pointers.
 */
enum MlStatus ml_scheduler_advance(struct MlScheduler *handle, uint64_t t, double *lr);

/**
 * Closed-form learning rate at step `t`.
 *
 * # Safety
 * `handle` and `lr` must be valid pointers.
 */
enum MlStatus ml_scheduler_lr_at_step(const struct MlScheduler *handle, uint64_t t, double *lr);

/**
 * Sets the decay period from a surge step and writes it to `period`.
 *
 * # Safety
 * `handle` and `period` must be valid pointers.
 */
enum MlStatus ml_scheduler_arm(struct MlScheduler *handle, uint64_t surge_step, uint64_t *period);

/**
 * # Safety
 * `handle` must come from a scheduler constructor and not have been freed.
 */
void ml_scheduler_free(struct MlScheduler *handle);

/**
 * # Safety
 * `out` must be a valid pointer.
 */
enum MlStatus ml_surge_new(size_t window, double surge_factor, struct MlSurgeDetector **out);

/**
 * Feeds one step's average response length. `triggered` is set to 1 once
 * the surge has been detected.
 *
 * # Safety
 * `handle` must be valid; `triggered` may be null.
 */
enum MlStatus ml_surge_observe(struct MlSurgeDetector *handle,
                               uint64_t step,
                               double avg_length,
                               uint8_t *triggered);

/**
 * Writes the surge step, or returns `NotTriggered`.
 *
 * # Safety
 * `handle` and `step` must be valid pointers.
 */
enum MlStatus ml_surge_step(const struct MlSurgeDetector *handle, uint64_t *step);

/**
 * # Safety
 * `handle` must come from [`ml_surge_new`] and not have been freed.
 */
void ml_surge_free(struct MlSurgeDetector *handle);

/**
 * Runs one training job from a JSON configuration and returns the run log
 * as JSON in `*out` (free with [`ml_string_free`]).
 *
 * # Safety
 * `config_json` must be a NUL-terminated string; `out` a valid pointer.
 */
enum MlStatus ml_train_json(const char *config_json, char **out);

/**
 * Evaluates the horizon bound and both lemmas on the default grid. Writes
 * the number of grid points and of failed points; returns
 * `VerificationFailed` if any point fails. When `report_json` is non-null it
 * receives the per-point reports (free with [`ml_string_free`]).
 *
 * # Safety
 * `points` and `failures` must be valid; `report_json` may be null.
 */
enum MlStatus ml_verify_theorem_grid(size_t *points, size_t *failures, char **report_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MISMATCH_LAB_H */
