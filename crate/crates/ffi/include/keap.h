#ifndef KEAP_H
#define KEAP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Range bucket selector for [`keap_precision_at_k`].
 */
typedef enum KeapRange {
  KEAP_RANGE_SHORT = 0,
  KEAP_RANGE_MEDIUM = 1,
  KEAP_RANGE_LONG = 2,
} KeapRange;

/**
 * Result codes shared by every fallible entry point.
 */
typedef enum KeapStatus {
  KEAP_STATUS_OK = 0,
  KEAP_STATUS_NULL_POINTER = 1,
  KEAP_STATUS_INVALID_ARGUMENT = 2,
  KEAP_STATUS_IO = 3,
  KEAP_STATUS_CORRUPT_CHECKPOINT = 4,
  KEAP_STATUS_UNDEFINED = 5,
  KEAP_STATUS_BUFFER_TOO_SMALL = 6,
  KEAP_STATUS_INTERNAL = 7,
} KeapStatus;

/**
 * Opaque handle to a loaded model.
 */
typedef struct KeapModel KeapModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or null when the
 * last call succeeded. Valid until the next call on the same thread.
 */
const char *keap_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *keap_version(void);

/**
 * Loads a checkpoint file and stores a new handle in `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum KeapStatus keap_model_load(const char *path, struct KeapModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`keap_model_load`] and not be used afterwards.
 */
void keap_model_free(struct KeapModel *model);

/**
 * Hidden width, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t keap_model_hidden_dim(const struct KeapModel *model);

/**
 * Longest protein the encoder accepts, excluding framing tokens.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t keap_model_max_protein_len(const struct KeapModel *model);

/**
 * Mean-pooled encoder representation of `sequence`, written to
 * `out[0..hidden]`.
 *
 * # Safety
 * `model` must be live, `sequence` NUL-terminated and `out` must hold
 * `out_len` floats.
 */
enum KeapStatus keap_model_embed(const struct KeapModel *model,
                                 const char *sequence,
                                 float *out,
                                 size_t out_len);

/**
 * Per-residue encoder states, row-major `[rows, hidden]`. `*rows` receives
 * the residue count. Passing a null `out` queries the row count only.
 *
 * # Safety
 * `model` must be live, `sequence` NUL-terminated, `rows` writable and a
 * non-null `out` must hold `out_len` floats.
 */
enum KeapStatus keap_model_embed_residues(const struct KeapModel *model,
                                          const char *sequence,
                                          float *out,
                                          size_t out_len,
                                          size_t *rows);

/**
 * Top-`L/divisor` contact precision over one range bucket. `truth` and
 * `probs` are row-major `len x len`; only `i < j` entries are read.
 *
 * # Safety
 * `truth` and `probs` must hold `len * len` elements and `out` be writable.
 */
enum KeapStatus keap_precision_at_k(size_t len,
                                    const uint8_t *truth,
                                    const double *probs,
                                    enum KeapRange range,
                                    size_t divisor,
                                    double *out);

/**
 * Spearman rank correlation with average ranks for ties.
 *
 * # Safety
 * `x` and `y` must hold `n` elements and `out` be writable.
 */
enum KeapStatus keap_spearman(const double *x, const double *y, size_t n, double *out);

/**
 * Mean squared error.
 *
 * # Safety
 * `pred` and `truth` must hold `n` elements and `out` be writable.
 */
enum KeapStatus keap_mse(const double *pred, const double *truth, size_t n, double *out);

/**
 * `1 - |u - v|_1 / normalizer`.
 *
 * # Safety
 * `u` and `v` must hold `n` elements and `out` be writable.
 */
enum KeapStatus keap_manhattan_similarity(const double *u,
                                          const double *v,
                                          size_t n,
                                          double normalizer,
                                          double *out);

/**
 * Multi-label F1 over `rows x cols` row-major 0/1 matrices. `macro_avg`
 * selects per-label averaging instead of pooled counts.
 *
 * # Safety
 * `pred` and `truth` must hold `rows * cols` bytes and `out` be writable.
 */
enum KeapStatus keap_multilabel_f1(const uint8_t *pred,
                                   const uint8_t *truth,
                                   size_t rows,
                                   size_t cols,
                                   bool macro_avg,
                                   double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KEAP_H */
