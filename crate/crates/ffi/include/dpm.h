#ifndef DPM_H
#define DPM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of a call.
 */
typedef enum DpmStatus {
  DPM_STATUS_OK = 0,
  DPM_STATUS_NULL_ARGUMENT = 1,
  DPM_STATUS_INVALID_UTF8 = 2,
  DPM_STATUS_IO = 3,
  DPM_STATUS_PARSE = 4,
  DPM_STATUS_INVALID_ARGUMENT = 5,
  DPM_STATUS_NUMERICAL = 6,
  DPM_STATUS_BUFFER_TOO_SMALL = 7,
  DPM_STATUS_OUT_OF_RANGE = 8,
  DPM_STATUS_PANIC = 99,
} DpmStatus;

/**
 * A loaded dataset.
 */
typedef struct DpmDataset DpmDataset;

/**
 * A model file: one parameter set per segment.
 */
typedef struct DpmModel DpmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message on this thread into `buffer` as a
 * NUL-terminated string, truncating to `capacity - 1` bytes. Returns the
 * untruncated length, excluding the terminator.
 *
 * # Safety
 * `buffer` must be null or valid for `capacity` bytes.
 */
size_t dpm_last_error_message(char *buffer, size_t capacity);

/**
 * Loads a dataset CSV. `segment_column` may be null.
 *
 * # Safety
 * String arguments must be null or NUL-terminated; `result` must be valid
 * for writes.
 */
enum DpmStatus dpm_dataset_load(const char *path,
                                const char *segment_column,
                                struct DpmDataset **result);

/**
 * # Safety
 * `dataset` must be null or a handle from [`dpm_dataset_load`] that has
 * not been freed.
 */
void dpm_dataset_free(struct DpmDataset *dataset);

/**
 * Number of customers, or 0 for a null handle.
 *
 * # Safety
 * `dataset` must be null or a live handle.
 */
size_t dpm_dataset_len(const struct DpmDataset *dataset);

/**
 * Days observed for customer `index`.
 *
 * # Safety
 * `dataset` must be null or a live handle; `horizon` must be valid for
 * writes.
 */
enum DpmStatus dpm_dataset_horizon(const struct DpmDataset *dataset, size_t index, size_t *horizon);

/**
 * Builds a single-segment model from `[c, phi, alpha[0..k], beta[0..l]]`.
 *
 * # Safety
 * `values` must be valid for `2 + k + l` reads; `result` must be valid for
 * writes.
 */
enum DpmStatus dpm_model_from_params(size_t k,
                                     size_t l,
                                     const double *values,
                                     struct DpmModel **result);

/**
 * Fits one parameter set to the whole dataset. `config_json` holds an
 * SGD configuration and may be null for the defaults.
 *
 * # Safety
 * `dataset` must be a live handle; `config_json` null or NUL-terminated;
 * `result` valid for writes.
 */
enum DpmStatus dpm_fit(const struct DpmDataset *dataset,
                       const char *config_json,
                       struct DpmModel **result);

/**
 * # Safety
 * `path` must be NUL-terminated; `result` valid for writes.
 */
enum DpmStatus dpm_model_load(const char *path, struct DpmModel **result);

/**
 * # Safety
 * `model` must be a live handle; `path` NUL-terminated.
 */
enum DpmStatus dpm_model_save(const struct DpmModel *model, const char *path);

/**
 * # Safety
 * `model` must be null or a live handle that has not been freed.
 */
void dpm_model_free(struct DpmModel *model);

/**
 * Copies `[c, phi, alpha.., beta..]` for `segment` (null for the default
 * set) into `buffer`; `len` receives the parameter count.
 *
 * # Safety
 * `model` must be a live handle; `segment` null or NUL-terminated;
 * `buffer` valid for `capacity` writes; `len` valid for writes.
 */
enum DpmStatus dpm_model_params(const struct DpmModel *model,
                                const char *segment,
                                double *buffer,
                                size_t capacity,
                                size_t *len);

/**
 * One-step-ahead purchase probabilities for customer `index`, using the
 * parameters of the customer's segment.
 *
 * # Safety
 * Handles must be live; `buffer` valid for `capacity` writes; `len` valid
 * for writes.
 */
enum DpmStatus dpm_score_customer(const struct DpmModel *model,
                                  const struct DpmDataset *dataset,
                                  size_t index,
                                  size_t particle_count,
                                  uint64_t seed,
                                  double *buffer,
                                  size_t capacity,
                                  size_t *len);

/**
 * Area under the ROC curve of `scores` against 0/1 `labels`.
 *
 * # Safety
 * `scores` and `labels` must be valid for `n` reads; `auc` valid for
 * writes.
 */
enum DpmStatus dpm_auc(const double *scores, const uint8_t *labels, size_t n, double *auc);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DPM_H */
