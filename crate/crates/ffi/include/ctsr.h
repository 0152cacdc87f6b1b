#ifndef CTSR_H
#define CTSR_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Length of every embedding written by `ctsr_model_embed`.
 */
#define CTSR_EMBED_DIM 64

typedef enum CtsrModelKind {
  CTSR_MODEL_RN2DWT = 0,
  CTSR_MODEL_RN2D = 1,
  CTSR_MODEL_RN1D = 2,
} CtsrModelKind;

typedef enum CtsrStatus {
  CTSR_OK = 0,
  CTSR_ERR_NULL = 1,
  CTSR_ERR_UTF8 = 2,
  CTSR_ERR_IO = 3,
  CTSR_ERR_PARSE = 4,
  CTSR_ERR_FORMAT = 5,
  CTSR_ERR_DIMENSION = 6,
  CTSR_ERR_PARAMETER = 7,
  CTSR_ERR_MODEL_KIND = 8,
  CTSR_ERR_STATE = 9,
  CTSR_ERR_OTHER = 10,
  CTSR_ERR_PANIC = 11,
} CtsrStatus;

/**
 * A loaded feature index. Item ids and labels are kept as C strings so
 * borrowed pointers stay valid for the handle's lifetime.
 */
typedef struct CtsrIndex CtsrIndex;

/**
 * A loaded checkpoint.
 */
typedef struct CtsrModel CtsrModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ctsr_version(void);

/**
 * Message of the last failed call on this thread, or NULL after a
 * success. Valid until the next ctsr call on the same thread.
 */
const char *ctsr_last_error_message(void);

/**
 * Unconstrained DTW distance with |a_i - b_j| local cost.
 *
 * # Safety
 * `a` and `b` must point to `na` and `nb` readable doubles; `out` must be writable.
 */
enum CtsrStatus ctsr_dtw_distance(const double *a,
                                  size_t na,
                                  const double *b,
                                  size_t nb,
                                  double *out_d);

/**
 * Euclidean distance of two equal-length series.
 *
 * # Safety
 * As for `ctsr_dtw_distance`.
 */
enum CtsrStatus ctsr_euclidean_distance(const double *a,
                                        size_t na,
                                        const double *b,
                                        size_t nb,
                                        double *out_d);

/**
 * Loads a `CTSR` checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out_model` must be writable.
 */
enum CtsrStatus ctsr_model_load(const char *p, struct CtsrModel **out_model);

/**
 * Releases a model; NULL is ignored.
 *
 * # Safety
 * `model` must come from `ctsr_model_load` and not be used afterwards.
 */
void ctsr_model_free(struct CtsrModel *model);

/**
 * # Safety
 * `model` must be a live handle; `out_kind` must be writable.
 */
enum CtsrStatus ctsr_model_kind(const struct CtsrModel *model, enum CtsrModelKind *out_kind);

/**
 * Series length the model was trained on.
 *
 * # Safety
 * `model` must be a live handle; `out_len` must be writable.
 */
enum CtsrStatus ctsr_model_series_length(const struct CtsrModel *model, size_t *out_len);

/**
 * Embeds one series into `CTSR_EMBED_DIM` floats. The series is resampled
 * to the model length and, when `znorm` is nonzero, z-normalized first.
 *
 * # Safety
 * `values` must hold `n` doubles and `out_embedding` `CTSR_EMBED_DIM` floats.
 */
enum CtsrStatus ctsr_model_embed(const struct CtsrModel *model,
                                 const double *values,
                                 size_t n,
                                 int32_t znorm,
                                 float *out_embedding);

/**
 * Loads a `CTSX` index.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out_index` must be writable.
 */
enum CtsrStatus ctsr_index_load(const char *p, struct CtsrIndex **out_index);

/**
 * Releases an index; NULL is ignored.
 *
 * # Safety
 * `index` must come from `ctsr_index_load` and not be used afterwards.
 */
void ctsr_index_free(struct CtsrIndex *index);

/**
 * Number of indexed items, 0 for NULL.
 *
 * # Safety
 * `index` must be NULL or a live handle.
 */
size_t ctsr_index_len(const struct CtsrIndex *index);

/**
 * Id of item `pos`, borrowed from the index; NULL when out of range.
 *
 * # Safety
 * `index` must be NULL or a live handle.
 */
const char *ctsr_index_item_id(const struct CtsrIndex *index, size_t pos);

/**
 * Label of item `pos`, borrowed from the index; NULL when out of range.
 *
 * # Safety
 * `index` must be NULL or a live handle.
 */
const char *ctsr_index_item_label(const struct CtsrIndex *index, size_t pos);

/**
 * Exact top-`k`: positions and scores (negated embedding distance) in rank
 * order; `*out_count` receives min(k, n).
 *
 * # Safety
 * `values` must hold `n` doubles; `out_positions` and `out_scores` must
 * hold `k` elements each.
 */
enum CtsrStatus ctsr_index_query_exact(const struct CtsrIndex *index,
                                       const struct CtsrModel *model,
                                       const double *values,
                                       size_t n,
                                       int32_t znorm,
                                       size_t k,
                                       size_t *out_positions,
                                       double *out_scores,
                                       size_t *out_count);

/**
 * Graph-guided top-`k` with a pool of `candidates`; the index must carry
 * a k-NN graph.
 *
 * # Safety
 * As for `ctsr_index_query_exact`.
 */
enum CtsrStatus ctsr_index_query_ann(const struct CtsrIndex *index,
                                     const struct CtsrModel *model,
                                     const double *values,
                                     size_t n,
                                     int32_t znorm,
                                     size_t k,
                                     size_t candidates,
                                     uint64_t seed,
                                     size_t *out_positions,
                                     double *out_scores,
                                     size_t *out_count);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CTSR_H */
