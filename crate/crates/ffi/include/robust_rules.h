#ifndef ROBUST_RULES_H
#define ROBUST_RULES_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible function.
 */
typedef enum RrStatus {
  RR_STATUS_OK = 0,
  RR_STATUS_NULL_POINTER = 1,
  RR_STATUS_INVALID_UTF8 = 2,
  RR_STATUS_INVALID_ARGUMENT = 3,
  RR_STATUS_CONFIG = 4,
  RR_STATUS_IO = 5,
  RR_STATUS_INVALID_DATA = 6,
  RR_STATUS_INVALID_GRAPH = 7,
  RR_STATUS_NO_SEARCHABLE_RULE = 8,
  RR_STATUS_PANIC = 9,
} RrStatus;

/**
 * Opaque dataset handle.
 */
typedef struct RrDataset RrDataset;

/**
 * Opaque causal-graph handle.
 */
typedef struct RrGraph RrGraph;

/**
 * Opaque trained-model handle.
 */
typedef struct RrModel RrModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null if none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *rr_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *rr_version(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library.
 */
void rr_string_free(char *s);

/**
 * Loads a CSV file with feature columns, a `y` column and optional `env`
 * and `group_id` columns.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum RrStatus rr_dataset_from_csv(const char *path, struct RrDataset **out);

/**
 * Builds a dataset from a row-major `n_rows x n_cols` matrix and 0/1 labels.
 *
 * # Safety
 * `values` must hold `n_rows * n_cols` doubles and `labels` `n_rows` bytes.
 */
enum RrStatus rr_dataset_from_rows(const double *values,
                                   size_t n_rows,
                                   size_t n_cols,
                                   const uint8_t *labels,
                                   struct RrDataset **out);

/**
 * # Safety
 * `data` must be null or a live dataset handle.
 */
size_t rr_dataset_n_samples(const struct RrDataset *data);

/**
 * # Safety
 * `data` must be null or a live dataset handle.
 */
size_t rr_dataset_n_features(const struct RrDataset *data);

/**
 * # Safety
 * `data` must be null or a handle not yet freed.
 */
void rr_dataset_free(struct RrDataset *data);

/**
 * Parses a graph from its JSON form (`nodes`, `directed`, `bidirected`).
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum RrStatus rr_graph_from_json(const char *json, struct RrGraph **out);

/**
 * Writes the invariant decomposition as JSON into `*out`; free it with
 * [`rr_string_free`].
 *
 * # Safety
 * `graph` must be a live handle; `out` must be writable.
 */
enum RrStatus rr_graph_decompose(const struct RrGraph *graph, char **out);

/**
 * # Safety
 * `graph` must be null or a handle not yet freed.
 */
void rr_graph_free(struct RrGraph *graph);

/**
 * Trains an ensemble. `config_json` may be null for defaults; `graph` is
 * required only for graph regularization.
 *
 * # Safety
 * Pointers must be null or valid as documented; `out` must be writable.
 */
enum RrStatus rr_train(const struct RrDataset *data,
                       const char *config_json,
                       const struct RrGraph *graph,
                       struct RrModel **out);

/**
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum RrStatus rr_model_from_json(const char *json, struct RrModel **out);

/**
 * Serializes the model; free the string with [`rr_string_free`].
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum RrStatus rr_model_to_json(const struct RrModel *model, char **out);

/**
 * Number of boosting terms.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t rr_model_len(const struct RrModel *model);

/**
 * Ensemble score of one point of `len` features; its sign is the
 * predicted class.
 *
 * # Safety
 * `point` must hold `len` doubles; `score` must be writable.
 */
enum RrStatus rr_model_score(const struct RrModel *model,
                             const double *point,
                             size_t len,
                             double *score);

/**
 * Scores every row of `data` into `scores`, which must hold `len` slots
 * with `len` equal to the dataset's sample count.
 *
 * # Safety
 * Handles must be live; `scores` must hold `len` doubles.
 */
enum RrStatus rr_model_score_dataset(const struct RrModel *model,
                                     const struct RrDataset *data,
                                     double *scores,
                                     size_t len);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void rr_model_free(struct RrModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ROBUST_RULES_H */
