#ifndef QVI_H
#define QVI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum QviStatus {
  QVI_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  QVI_STATUS_NULL_POINTER = 1,
  /**
   * An argument is out of range or does not fit the model.
   */
  QVI_STATUS_INVALID_ARGUMENT = 2,
  /**
   * A configuration, checkpoint or data file could not be parsed.
   */
  QVI_STATUS_PARSE = 3,
  QVI_STATUS_IO = 4,
  /**
   * A computation produced NaN or infinity.
   */
  QVI_STATUS_NON_FINITE = 5,
  /**
   * At least one gradient check case exceeded the tolerance.
   */
  QVI_STATUS_GRADCHECK_FAILED = 6,
  /**
   * A bug: an internal invariant broke or a panic was caught.
   */
  QVI_STATUS_INTERNAL = 7,
} QviStatus;

/**
 * A loaded model checkpoint.
 */
typedef struct QviModel QviModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null if none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *qvi_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *qvi_version(void);

/**
 * Loads a checkpoint written by `qvi train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum QviStatus qvi_model_load(const char *path, struct QviModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`qvi_model_load`] and not be used afterwards.
 */
void qvi_model_free(struct QviModel *model);

/**
 * Number of output classes, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t qvi_model_num_classes(const struct QviModel *model);

/**
 * Vector dimension the model expects, or 0 for token models and null.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t qvi_model_input_dim(const struct QviModel *model);

/**
 * Classifies `batch` token sequences. `ids` holds them back to back,
 * `lengths[b]` ids each; `out_labels` receives `batch` predictions.
 *
 * # Safety
 * `lengths` and `out_labels` must hold `batch` elements and `ids` the sum
 * of `lengths`.
 */
enum QviStatus qvi_model_predict_tokens(const struct QviModel *model,
                                        const uint32_t *ids,
                                        const size_t *lengths,
                                        size_t batch,
                                        size_t *out_labels);

/**
 * Classifies one whitespace-separated text with the checkpoint vocabulary.
 *
 * # Safety
 * `text` must be NUL-terminated and `out_label` valid.
 */
enum QviStatus qvi_model_predict_text(const struct QviModel *model,
                                      const char *text,
                                      size_t *out_label);

/**
 * Classifies `batch` (query, values) pairs for a vector-input model.
 * `queries` is `[batch × dim]`, `values` is `[batch × seq_len × dim]`.
 *
 * # Safety
 * The arrays must have the stated sizes and `out_labels` room for `batch`.
 */
enum QviStatus qvi_model_predict_vectors(const struct QviModel *model,
                                         const double *queries,
                                         const double *values,
                                         size_t batch,
                                         size_t seq_len,
                                         size_t dim,
                                         size_t *out_labels);

/**
 * Value-aligned transformed queries: `out[i] = Σ_j softmax_j(v_i·q_j/√d) q_j`.
 * `q` is `[m × dim]`, `v` and `out` are `[n × dim]`.
 *
 * # Safety
 * The arrays must have the stated sizes.
 */
enum QviStatus qvi_transformed_queries(const double *q,
                                       size_t m,
                                       const double *v,
                                       size_t n,
                                       size_t dim,
                                       double *out);

/**
 * Runs the gradient-check suite. `scope` is "ops", "attention", "models"
 * or "all". Writes the case count, failures and worst relative error to
 * any non-null output; returns `QVI_STATUS_GRADCHECK_FAILED` if a case
 * failed.
 *
 * # Safety
 * `scope` must be NUL-terminated; outputs must be null or valid.
 */
enum QviStatus qvi_gradcheck(const char *scope,
                             uint64_t seed,
                             size_t *out_cases,
                             size_t *out_failed,
                             double *out_worst_rel);

/**
 * Writes a gated-retrieval dataset of `n` samples to `path`.
 *
 * # Safety
 * `path` must be NUL-terminated.
 */
enum QviStatus qvi_synth_gated(const char *path,
                               size_t n,
                               size_t seq_len,
                               size_t dim,
                               uint64_t seed);

/**
 * Writes a token-retrieval dataset of `n` samples to `path`.
 *
 * # Safety
 * `path` must be NUL-terminated.
 */
enum QviStatus qvi_synth_tokens(const char *path,
                                size_t n,
                                size_t seq_len,
                                size_t vocab_size,
                                size_t num_classes,
                                uint64_t seed);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* QVI_H */
