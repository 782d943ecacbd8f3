#ifndef MICE_H
#define MICE_H

#pragma once

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MiceStatus {
  MICE_STATUS_OK = 0,
  MICE_STATUS_NULL_POINTER = 1,
  MICE_STATUS_INVALID_ARGUMENT = 2,
  MICE_STATUS_IO = 3,
  MICE_STATUS_CONFIG = 4,
  MICE_STATUS_DATA = 5,
  MICE_STATUS_TRAINING = 6,
  MICE_STATUS_CHECKPOINT = 7,
  MICE_STATUS_BUFFER_TOO_SMALL = 8,
  MICE_STATUS_PANIC = 9,
} MiceStatus;

/**
 * A loaded or generated dataset.
 */
typedef struct MiceDataset MiceDataset;

/**
 * A trained model together with its configuration.
 */
typedef struct MiceModel MiceModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or null. Valid until
 * the next call into this library on the same thread.
 */
const char *mice_last_error_message(void);

/**
 * Generate a synthetic dataset of `n_clusters * n_per_cluster` points.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for a handle.
 */
enum MiceStatus mice_dataset_generate(size_t n_clusters,
                                      size_t d_input,
                                      size_t n_per_cluster,
                                      double concentration,
                                      uint64_t seed,
                                      struct MiceDataset **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid handle slot.
 */
enum MiceStatus mice_dataset_load(const char *path, struct MiceDataset **out);

/**
 * # Safety
 * `ds` must be null or a handle from this library not yet freed.
 */
void mice_dataset_free(struct MiceDataset *ds);

/**
 * Number of points, or 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t mice_dataset_len(const struct MiceDataset *ds);

/**
 * Input dimension, or 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t mice_dataset_dim(const struct MiceDataset *ds);

/**
 * Train a model with the configuration file at `config_path`.
 *
 * # Safety
 * `config_path` must be a NUL-terminated string, `ds` a live handle and
 * `out` a valid handle slot.
 */
enum MiceStatus mice_train(const char *config_path,
                           const struct MiceDataset *ds,
                           struct MiceModel **out);

/**
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum MiceStatus mice_model_save(const struct MiceModel *model, const char *path);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid handle slot.
 */
enum MiceStatus mice_model_load(const char *path, struct MiceModel **out);

/**
 * # Safety
 * `model` must be null or a handle from this library not yet freed.
 */
void mice_model_free(struct MiceModel *model);

/**
 * Number of clusters of a model, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t mice_model_clusters(const struct MiceModel *model);

/**
 * Cluster every point. Writes `len` labels (0-based) to `labels` and, when
 * `posterior` is non-null, `len * K` row-major posterior entries.
 *
 * # Safety
 * `labels` must hold `labels_len` elements and `posterior`, if non-null,
 * `posterior_len` elements.
 */
enum MiceStatus mice_evaluate(const struct MiceModel *model,
                              const struct MiceDataset *ds,
                              size_t *labels,
                              size_t labels_len,
                              double *posterior,
                              size_t posterior_len);

/**
 * Clustering accuracy under the best one-to-one label matching.
 *
 * # Safety
 * `truth` and `pred` must hold `len` elements; `out` must be writable.
 */
enum MiceStatus mice_acc(const size_t *truth, const size_t *pred, size_t len, double *out);

/**
 * Normalized mutual information (arithmetic-mean normalization).
 *
 * # Safety
 * As for [`mice_acc`].
 */
enum MiceStatus mice_nmi(const size_t *truth, const size_t *pred, size_t len, double *out);

/**
 * Adjusted Rand index.
 *
 * # Safety
 * As for [`mice_acc`].
 */
enum MiceStatus mice_ari(const size_t *truth, const size_t *pred, size_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MICE_H */
