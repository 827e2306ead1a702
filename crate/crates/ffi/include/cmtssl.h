#ifndef CMTSSL_H
#define CMTSSL_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CmtsslStatus {
  CMTSSL_STATUS_OK = 0,
  CMTSSL_STATUS_NULL_POINTER = 1,
  CMTSSL_STATUS_INVALID_ARGUMENT = 2,
  CMTSSL_STATUS_SHAPE = 3,
  CMTSSL_STATUS_CONFIG = 4,
  CMTSSL_STATUS_DATA = 5,
  CMTSSL_STATUS_DEGENERATE = 6,
  CMTSSL_STATUS_FORMAT = 7,
  CMTSSL_STATUS_IO = 8,
  CMTSSL_STATUS_DIVERGED = 9,
  CMTSSL_STATUS_PANIC = 10,
} CmtsslStatus;

typedef enum CmtsslAggregation {
  CMTSSL_AGGREGATION_AVERAGE = 0,
  CMTSSL_AGGREGATION_MAXIMUM = 1,
  CMTSSL_AGGREGATION_STD = 2,
} CmtsslAggregation;

/**
 * A restored checkpoint with its normalization statistics.
 */
typedef struct CmtsslModel CmtsslModel;

/**
 * Curriculum stage table.
 */
typedef struct CmtsslSchedule CmtsslSchedule;

/**
 * Fractions in `[0, 1]`.
 */
typedef struct CmtsslMetrics {
  double oa;
  double aa;
  double kappa;
} CmtsslMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, a static NUL-terminated string.
 */
const char *cmtssl_version(void);

/**
 * Message of the last failed call on this thread, or NULL after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *cmtssl_last_error(void);

/**
 * OA, AA and kappa of a row-major `num_classes × num_classes` confusion
 * matrix (rows are ground truth).
 *
 * # Safety
 * `counts` must point to `num_classes²` readable values and `out` to a
 * writable [`CmtsslMetrics`].
 */
enum CmtsslStatus cmtssl_metrics_from_counts(const uint64_t *counts,
                                             size_t num_classes,
                                             struct CmtsslMetrics *out);

/**
 * Gradient-magnitude difficulty of one `height × width × bands` cube laid
 * out with the band index fastest.
 *
 * # Safety
 * `values` must point to `height·width·bands` readable values and `out` to a
 * writable double.
 */
enum CmtsslStatus cmtssl_difficulty(const double *values,
                                    size_t height,
                                    size_t width,
                                    size_t bands,
                                    enum CmtsslAggregation aggregation,
                                    double *out);

/**
 * Builds a curriculum of `stages` cumulative stages over `dataset_size`
 * cubes, the first trained for `initial_epochs` epochs and each later one
 * `growth` times longer.
 *
 * # Safety
 * `out` must be a writable handle slot. The handle is released with
 * [`cmtssl_schedule_free`].
 */
enum CmtsslStatus cmtssl_schedule_new(size_t dataset_size,
                                      size_t stages,
                                      size_t initial_epochs,
                                      double growth,
                                      struct CmtsslSchedule **out);

/**
 * # Safety
 * `schedule` must be NULL or a handle from [`cmtssl_schedule_new`] that has
 * not been freed.
 */
void cmtssl_schedule_free(struct CmtsslSchedule *schedule);

/**
 * Size and epoch count of 1-based stage `index`.
 *
 * # Safety
 * `schedule` must be a live handle; `size` and `epochs` writable.
 */
enum CmtsslStatus cmtssl_schedule_stage(const struct CmtsslSchedule *schedule,
                                        size_t index,
                                        size_t *size,
                                        size_t *epochs);

/**
 * Number of stages, or 0 for a NULL handle.
 *
 * # Safety
 * `schedule` must be NULL or a live handle.
 */
size_t cmtssl_schedule_stage_count(const struct CmtsslSchedule *schedule);

/**
 * Optimizer steps of the whole curriculum at mini-batch size `batch_size`.
 *
 * # Safety
 * `schedule` must be a live handle and `steps` writable.
 */
enum CmtsslStatus cmtssl_schedule_match_budget(const struct CmtsslSchedule *schedule,
                                               size_t batch_size,
                                               size_t *steps);

/**
 * Loads a checkpoint file or directory.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string and `out` a writable handle
 * slot. The handle is released with [`cmtssl_model_free`].
 */
enum CmtsslStatus cmtssl_model_load(const char *path, struct CmtsslModel **out);

/**
 * # Safety
 * `model` must be NULL or a handle from [`cmtssl_model_load`] that has not
 * been freed.
 */
void cmtssl_model_free(struct CmtsslModel *model);

/**
 * Total trainable parameters, or 0 for a NULL handle.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t cmtssl_model_param_count(const struct CmtsslModel *model);

/**
 * Expected cube shape.
 *
 * # Safety
 * `model` must be a live handle; the three outputs writable.
 */
enum CmtsslStatus cmtssl_model_input_shape(const struct CmtsslModel *model,
                                           size_t *height,
                                           size_t *width,
                                           size_t *bands);

/**
 * Per-pixel class prediction for one raw cube (band index fastest). The
 * checkpoint's normalization is applied first when it has one.
 *
 * # Safety
 * `values` must point to `height·width·bands` readable values and `labels`
 * to `height·width` writable slots.
 */
enum CmtsslStatus cmtssl_model_predict(const struct CmtsslModel *model,
                                       const double *values,
                                       size_t height,
                                       size_t width,
                                       size_t bands,
                                       uint32_t *labels);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CMTSSL_H */
