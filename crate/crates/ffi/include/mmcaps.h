#ifndef MMCAPS_H
#define MMCAPS_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Modality codes accepted by [`mmcaps_model_embed`].
 */
#define MMCAPS_MODALITY_VIDEO 0

#define MMCAPS_MODALITY_AUDIO 1

#define MMCAPS_MODALITY_TEXT 2

/**
 * Metric codes accepted by [`mmcaps_retrieval_metrics`].
 */
#define MMCAPS_METRIC_EUCLIDEAN 0

#define MMCAPS_METRIC_DOT 1

/**
 * Result of every fallible call.
 */
typedef enum MmcapsStatus {
  MMCAPS_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  MMCAPS_STATUS_NULL_POINTER = 1,
  /**
   * A configuration or argument value is invalid.
   */
  MMCAPS_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Array sizes do not match the model or each other.
   */
  MMCAPS_STATUS_SHAPE_MISMATCH = 3,
  /**
   * A file or buffer is malformed.
   */
  MMCAPS_STATUS_FORMAT = 4,
  MMCAPS_STATUS_IO = 5,
  /**
   * Any other failure inside the library.
   */
  MMCAPS_STATUS_RUNTIME = 6,
  /**
   * The library panicked; the handle involved should be freed.
   */
  MMCAPS_STATUS_PANIC = 7,
} MmcapsStatus;

/**
 * Opaque model handle.
 */
typedef struct MmcapsModel MmcapsModel;

/**
 * Retrieval summary: recall at 1, 5 and 10 and the median rank.
 */
typedef struct MmcapsRetrieval {
  double r1;
  double r5;
  double r10;
  double medr;
} MmcapsRetrieval;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or an empty string.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *mmcaps_last_error_message(void);

/**
 * Builds a freshly initialized model from a JSON model configuration.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string and `out` a writable pointer.
 */
enum MmcapsStatus mmcaps_model_new_from_json(const char *config_json,
                                             uint64_t seed,
                                             struct MmcapsModel **out);

/**
 * Loads the model stored in a training checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum MmcapsStatus mmcaps_model_load_checkpoint(const char *path, struct MmcapsModel **out);

/**
 * Embeds `rows` feature vectors of one modality into the joint space.
 * `features` is row-major `rows × cols`; `out` receives `rows × embed_dim`
 * values and `out_len` must equal that count.
 *
 * # Safety
 * `model` must come from a constructor and not be freed; the arrays must
 * hold the stated number of `double`s.
 */
enum MmcapsStatus mmcaps_model_embed(const struct MmcapsModel *model,
                                     uint32_t modality_code,
                                     const double *features,
                                     size_t rows,
                                     size_t cols,
                                     double *out,
                                     size_t out_len);

/**
 * Joint embedding width `D`, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t mmcaps_model_embed_dim(const struct MmcapsModel *model);

/**
 * Expected feature width for a modality, or 0 for a null handle or bad code.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t mmcaps_model_input_dim(const struct MmcapsModel *model, uint32_t modality_code);

/**
 * Number of trainable scalars, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t mmcaps_model_param_count(const struct MmcapsModel *model);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void mmcaps_model_free(struct MmcapsModel *model);

/**
 * Retrieval of `gallery` row `i` by `query` row `i`, both `n × d`
 * row-major.
 *
 * # Safety
 * The arrays must hold `n·d` doubles and `out` must be writable.
 */
enum MmcapsStatus mmcaps_retrieval_metrics(const double *query,
                                           const double *gallery,
                                           size_t n,
                                           size_t d,
                                           uint32_t metric,
                                           struct MmcapsRetrieval *out);

/**
 * Symmetric contrastive loss of an `n × n` similarity matrix whose
 * diagonal holds the matching pairs.
 *
 * # Safety
 * `similarity` must hold `n·n` doubles and `out` must be writable.
 */
enum MmcapsStatus mmcaps_mms_pair_loss(const double *similarity,
                                       size_t n,
                                       double delta,
                                       double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MMCAPS_H */
