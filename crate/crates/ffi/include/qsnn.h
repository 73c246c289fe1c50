/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef QSNN_H
#define QSNN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum QsnnStatus {
  QSNN_STATUS_OK = 0,
  QSNN_STATUS_NULL_POINTER = 1,
  QSNN_STATUS_INVALID_ARGUMENT = 2,
  QSNN_STATUS_CONFIG = 3,
  QSNN_STATUS_IO = 4,
  QSNN_STATUS_DATA = 5,
  QSNN_STATUS_CHECKPOINT = 6,
  QSNN_STATUS_SHAPE = 7,
  QSNN_STATUS_NON_FINITE = 8,
  QSNN_STATUS_TRAINING_ABORTED = 9,
  QSNN_STATUS_OUT_OF_RANGE = 10,
  QSNN_STATUS_PANIC = 11,
} QsnnStatus;

/**
 * Opaque training configuration.
 */
typedef struct QsnnConfig QsnnConfig;

/**
 * Opaque result of a completed training run.
 */
typedef struct QsnnRun QsnnRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread (empty after a success).
 * The pointer stays valid until the next `qsnn_*` call on the same thread.
 */
const char *qsnn_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *qsnn_version(void);

/**
 * Load a TOML config file. Relative dataset paths resolve against the file's directory.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum QsnnStatus qsnn_config_from_file(const char *path, struct QsnnConfig **out);

/**
 * Build a shipped preset (e.g. `"desk-flt32"`).
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` a valid pointer.
 */
enum QsnnStatus qsnn_config_from_preset(const char *name, struct QsnnConfig **out);

/**
 * # Safety
 * `cfg` must come from a `qsnn_config_*` constructor.
 */
enum QsnnStatus qsnn_config_set_seed(struct QsnnConfig *cfg, uint64_t seed);

/**
 * # Safety
 * `cfg` must come from a `qsnn_config_*` constructor.
 */
enum QsnnStatus qsnn_config_set_epochs(struct QsnnConfig *cfg, uint64_t epochs);

/**
 * # Safety
 * `cfg` must be null or come from a `qsnn_config_*` constructor; it must not be used afterwards.
 */
void qsnn_config_free(struct QsnnConfig *cfg);

/**
 * Train to completion (blocking).
 *
 * # Safety
 * `cfg` must be a live config handle and `out` a valid pointer.
 */
enum QsnnStatus qsnn_train(const struct QsnnConfig *cfg, struct QsnnRun **out);

/**
 * # Safety
 * `run` must be a live run handle and `out` a valid pointer.
 */
enum QsnnStatus qsnn_run_test_accuracy(const struct QsnnRun *run, double *out);

/**
 * Number of logged minibatch iterations.
 *
 * # Safety
 * `run` must be a live run handle and `out` a valid pointer.
 */
enum QsnnStatus qsnn_run_iterations(const struct QsnnRun *run, uint64_t *out);

/**
 * Learning rate used at logged iteration `index`.
 *
 * # Safety
 * `run` must be a live run handle and `out` a valid pointer.
 */
enum QsnnStatus qsnn_run_lr_at(const struct QsnnRun *run, uint64_t index, double *out);

/**
 * Minibatch loss at logged iteration `index`.
 *
 * # Safety
 * `run` must be a live run handle and `out` a valid pointer.
 */
enum QsnnStatus qsnn_run_loss_at(const struct QsnnRun *run, uint64_t index, double *out);

/**
 * # Safety
 * `run` must be a live run handle and `path` a NUL-terminated string.
 */
enum QsnnStatus qsnn_run_save_checkpoint(const struct QsnnRun *run, const char *path);

/**
 * Write run.csv, epochs.csv, model.ckpt and metadata.toml into `dir`.
 *
 * # Safety
 * `run` must be a live run handle and `dir` a NUL-terminated string.
 */
enum QsnnStatus qsnn_run_write_artifacts(const struct QsnnRun *run, const char *dir);

/**
 * # Safety
 * `run` must be null or a live run handle; it must not be used afterwards.
 */
void qsnn_run_free(struct QsnnRun *run);

/**
 * Cosine-annealed rate with hard restarts every `period` iterations.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum QsnnStatus qsnn_cosine_lr(uint64_t iteration, double initial_lr, uint64_t period, double *out);

/**
 * Symmetric 4-bit quantization of `len` values. Writes the quantized values
 * to `out` (may alias `weights`) and the scale to `scale`.
 *
 * # Safety
 * `weights` and `out` must point to `len` doubles; `scale` must be valid.
 */
enum QsnnStatus qsnn_quantize(const double *weights, uintptr_t len, double *out, double *scale);

/**
 * Surrogate derivative `1 / (1 + k·|θ − u|)²`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum QsnnStatus qsnn_surrogate_grad(double u, double theta, double slope, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QSNN_H */
