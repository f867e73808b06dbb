#ifndef KOOPDUAL_H
#define KOOPDUAL_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes. 1..3 match the exit codes of the `koopctl` tool.
typedef enum KdStatus {
  KD_STATUS_OK = 0,
  KD_STATUS_CONFIG_ERROR = 1,
  KD_STATUS_NUMERICAL_ERROR = 2,
  KD_STATUS_IO_ERROR = 3,
  KD_STATUS_NULL_POINTER = 4,
  KD_STATUS_INVALID_ARGUMENT = 5,
  KD_STATUS_PANIC = 6,
} KdStatus;

// Pipeline stage selector for `kd_run_stage`.
typedef enum KdStage {
  KD_STAGE_GENERATE = 0,
  KD_STAGE_IDENTIFY = 1,
  KD_STAGE_SYNTHESIZE = 2,
  KD_STAGE_SIMULATE = 3,
  KD_STAGE_REPORT = 4,
} KdStage;

// Experiment configuration.
typedef struct KdConfig KdConfig;

// Dual-loop controller together with its running state.
typedef struct KdController KdController;

// Identified lifted linear model.
typedef struct KdModel KdModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *kd_version(void);

// Copies the calling thread's last error message into `buf` (truncated,
// always NUL-terminated when `cap > 0`). Returns the full message length.
//
// # Safety
// `buf` must point to `cap` writable bytes or be null with `cap == 0`.
uintptr_t kd_last_error(char *buf, uintptr_t cap);

// Parses a JSON experiment configuration.
//
// # Safety
// `json` must be a NUL-terminated string; `out` must be a valid pointer.
enum KdStatus kd_config_from_json(const char *json, struct KdConfig **out);

// The bundled Van der Pol configuration.
//
// # Safety
// `out` must be a valid pointer.
enum KdStatus kd_config_default(struct KdConfig **out);

// # Safety
// `cfg` must come from a `kd_config_*` constructor and not be used afterwards.
void kd_config_free(struct KdConfig *cfg);

// Runs one pipeline stage, reading and writing artifacts under `out_dir`.
//
// # Safety
// `cfg` must be a live handle and `out_dir` a NUL-terminated path.
enum KdStatus kd_run_stage(const struct KdConfig *cfg, const char *out_dir, enum KdStage stage);

// Fits a lifted model to snapshot data with a monomial basis of the given
// degree. `x1`, `x2` are `n_state x n_samples` and `u` is
// `n_input x n_samples`, all column-major. Outputs are the lifted states.
//
// # Safety
// Array arguments must hold the stated number of values; `out` must be valid.
enum KdStatus kd_model_fit(const double *x1,
                           const double *x2,
                           const double *u,
                           uintptr_t n_state,
                           uintptr_t n_input,
                           uintptr_t n_samples,
                           uintptr_t degree,
                           double dt,
                           struct KdModel **out);

// Loads a model written by the identify stage.
//
// # Safety
// `json` must be NUL-terminated; `out` must be valid.
enum KdStatus kd_model_from_json(const char *json, struct KdModel **out);

// Lifted dimension of the model, 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
uintptr_t kd_model_lifted_dim(const struct KdModel *model);

// Open-loop prediction from `x0` under `steps` inputs (column-major
// `n_input x steps`). Writes `(steps + 1) * n_state` values to `states`.
//
// # Safety
// `model` must be live; arrays must hold the stated number of values.
enum KdStatus kd_model_predict(const struct KdModel *model,
                               const double *x0,
                               const double *u,
                               uintptr_t steps,
                               double *states);

// # Safety
// `model` must come from a `kd_model_*` constructor and not be used afterwards.
void kd_model_free(struct KdModel *model);

// Loads the controller synthesized for noise level `sigma` from `out_dir`.
// The robust loop is enabled when a Q-filter was found.
//
// # Safety
// `cfg` must be live, `out_dir` NUL-terminated and `out` valid.
enum KdStatus kd_controller_load(const struct KdConfig *cfg,
                                 const char *out_dir,
                                 double sigma,
                                 struct KdController **out);

// Number of measurement entries the controller expects per step.
//
// # Safety
// `c` must be null or a live handle.
uintptr_t kd_controller_output_dim(const struct KdController *c);

// Number of plant inputs produced per step.
//
// # Safety
// `c` must be null or a live handle.
uintptr_t kd_controller_input_dim(const struct KdController *c);

// Lifts a physical state into the controller's measurement coordinates.
// Writes `kd_controller_output_dim` values.
//
// # Safety
// `c` must be live; `x` holds `n` values and `y` has room for the output.
enum KdStatus kd_controller_lift(const struct KdController *c,
                                 const double *x,
                                 uintptr_t n,
                                 double *y);

// Resets the observer to `y0` and the filter state to zero.
//
// # Safety
// `c` must be live; `y0` holds `ny` values.
enum KdStatus kd_controller_reset(struct KdController *c, const double *y0, uintptr_t ny);

// Switches the robust loop on (nonzero) or off. Fails when switching on a
// controller without a Q-filter.
//
// # Safety
// `c` must be live.
enum KdStatus kd_controller_set_robust(struct KdController *c, int enabled);

// One control update: reads `ny` measurements, writes `nu` inputs and
// advances the internal state.
//
// # Safety
// `c` must be live; `y` holds `ny` values and `u` has room for `nu`.
enum KdStatus kd_controller_step(struct KdController *c,
                                 const double *y,
                                 uintptr_t ny,
                                 double *u,
                                 uintptr_t nu);

// # Safety
// `c` must come from `kd_controller_load` and not be used afterwards.
void kd_controller_free(struct KdController *c);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KOOPDUAL_H */
