#ifndef ERNETCL_H
#define ERNETCL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible call.
 */
typedef enum ec_status {
  EC_STATUS_OK = 0,
  EC_STATUS_NULL_POINTER = 1,
  EC_STATUS_INVALID_ARGUMENT = 2,
  EC_STATUS_IO_ERROR = 3,
  EC_STATUS_FORMAT_ERROR = 4,
  EC_STATUS_INTERNAL_ERROR = 5,
} ec_status;

/**
 * Opaque dataset handle.
 */
typedef struct ec_dataset ec_dataset;

/**
 * Opaque model handle (checkpoint: config plus parameters).
 */
typedef struct ec_model ec_model;

/**
 * Evaluation aggregates. `micro_f1_excl_neutral` is meaningful only when
 * `has_excl_neutral` is true.
 */
typedef struct ec_metrics {
  double accuracy;
  double weighted_f1;
  double micro_f1;
  double macro_f1;
  double micro_f1_excl_neutral;
  bool has_excl_neutral;
} ec_metrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ernetcl_version(void);

/**
 * Message for the most recent failure on this thread. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *ernetcl_last_error(void);

/**
 * Load a dataset file. On success `*out` owns the handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum ec_status ernetcl_dataset_load(const char *path, struct ec_dataset **out);

/**
 * # Safety
 * `ds` must come from `ernetcl_dataset_load` and not already be freed.
 */
void ernetcl_dataset_free(struct ec_dataset *ds);

/**
 * # Safety
 * `ds` and `out` must be valid pointers.
 */
enum ec_status ernetcl_dataset_len(const struct ec_dataset *ds, size_t *out);

/**
 * # Safety
 * `ds` and `out` must be valid pointers.
 */
enum ec_status ernetcl_dataset_feature_dim(const struct ec_dataset *ds, size_t *out);

/**
 * Cached difficulty score of one conversation.
 *
 * # Safety
 * `ds` and `out` must be valid pointers.
 */
enum ec_status ernetcl_dataset_difficulty(const struct ec_dataset *ds, size_t index, double *out);

/**
 * Copy a conversation id into `buf` (NUL-terminated). `*written` receives
 * the id length excluding the terminator; if `cap` is too small the call
 * fails and `*written` holds the required length.
 *
 * # Safety
 * `ds`, `buf`, and `written` must be valid; `buf` must hold `cap` bytes.
 */
enum ec_status ernetcl_dataset_conversation_id(const struct ec_dataset *ds,
                                               size_t index,
                                               char *buf,
                                               size_t cap,
                                               size_t *written);

/**
 * Load a checkpoint. On success `*out` owns the handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum ec_status ernetcl_model_load(const char *path, struct ec_model **out);

/**
 * # Safety
 * `model` must come from `ernetcl_model_load` and not already be freed.
 */
void ernetcl_model_free(struct ec_model *model);

/**
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum ec_status ernetcl_model_feature_dim(const struct ec_model *model, size_t *out);

/**
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum ec_status ernetcl_model_num_classes(const struct ec_model *model, size_t *out);

/**
 * Classify one conversation given row-major `[num_utterances, feature_dim]`
 * features; writes one label per utterance into `out_labels`.
 *
 * # Safety
 * `features` must hold `num_utterances * feature_dim` doubles and
 * `out_labels` must hold `num_utterances` entries.
 */
enum ec_status ernetcl_model_predict(const struct ec_model *model,
                                     const double *features,
                                     size_t num_utterances,
                                     size_t feature_dim,
                                     uint32_t *out_labels);

/**
 * Evaluate a model over a dataset.
 *
 * # Safety
 * All pointers must be valid.
 */
enum ec_status ernetcl_model_evaluate(const struct ec_model *model,
                                      const struct ec_dataset *ds,
                                      struct ec_metrics *out);

/**
 * Difficulty of one conversation given parallel speaker/label arrays in
 * chronological order.
 *
 * # Safety
 * `speakers` and `labels` must hold `len` entries; `out` must be valid.
 */
enum ec_status ernetcl_difficulty(const uint32_t *speakers,
                                  const uint32_t *labels,
                                  size_t len,
                                  double *out);

/**
 * Curriculum weight for epoch `epoch` of `max_epochs` under the given
 * schedule.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum ec_status ernetcl_curriculum_weight(uint32_t epoch,
                                         uint32_t max_epochs,
                                         double delta,
                                         double sigma,
                                         double difficulty,
                                         double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ERNETCL_H */
