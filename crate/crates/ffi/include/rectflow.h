#ifndef RECTFLOW_H
#define RECTFLOW_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes. Values 2 to 10 match the CLI exit codes.
 */
typedef enum RfStatus {
  RF_STATUS_OK = 0,
  RF_STATUS_NULL_POINTER = 1,
  RF_STATUS_INPUT = 2,
  RF_STATUS_CONFIG = 3,
  RF_STATUS_MISSING_INPUT = 4,
  RF_STATUS_LINEAGE = 5,
  RF_STATUS_USAGE = 6,
  RF_STATUS_TRAINING = 7,
  RF_STATUS_SIMULATION = 8,
  RF_STATUS_FORMAT = 9,
  RF_STATUS_IO = 10,
  RF_STATUS_PANIC = 11,
} RfStatus;

/**
 * Opaque handle to a loaded stage.
 */
typedef struct RfStage RfStage;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a checkpoint. On success `*out` owns a handle to free with `rf_stage_free`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum RfStatus rf_stage_load(const char *path, struct RfStage **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `stage` must come from `rf_stage_load` and not be freed twice.
 */
void rf_stage_free(struct RfStage *stage);

/**
 * State dimension, number of condition labels (excluding NULL), stage index
 * and whether the stage is a one-step student.
 *
 * # Safety
 * `stage` must be a live handle; each output pointer may be null.
 */
enum RfStatus rf_stage_info(const struct RfStage *stage,
                            size_t *dim,
                            size_t *num_labels,
                            uint32_t *k,
                            bool *one_step);

/**
 * Guidance scale the stage samples at by default.
 *
 * # Safety
 * `stage` must be a live handle and `alpha` a valid pointer.
 */
enum RfStatus rf_stage_alpha(const struct RfStage *stage, double *alpha);

/**
 * Guided velocity `alpha v(x, t | c) + (1 - alpha) v(x, t | NULL)` for `n` rows.
 *
 * # Safety
 * `x` and `out` hold `n * dim` values, `t` and `c` hold `n` values.
 */
enum RfStatus rf_stage_velocity(const struct RfStage *stage,
                                const double *x,
                                const double *t,
                                const size_t *c,
                                size_t n,
                                double alpha,
                                double *out);

/**
 * Endpoints from noise `z0`: `steps` Euler steps at guidance `alpha` for flows,
 * a single step for one-step students (`steps` and `alpha` are ignored).
 *
 * # Safety
 * `z0` and `out` hold `n * dim` values and `c` holds `n` values.
 */
enum RfStatus rf_stage_sample(const struct RfStage *stage,
                              const double *z0,
                              const size_t *c,
                              size_t n,
                              size_t steps,
                              double alpha,
                              double *out);

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length without the NUL.
 *
 * # Safety
 * `buf` must hold `len` bytes or be null.
 */
size_t rf_last_error_message(char *buf, size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RECTFLOW_H */
