#ifndef EAGLE_H
#define EAGLE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EagleStatus {
  EAGLE_STATUS_OK = 0,
  EAGLE_STATUS_NULL_POINTER = 1,
  EAGLE_STATUS_INVALID_ARGUMENT = 2,
  EAGLE_STATUS_IO = 3,
  EAGLE_STATUS_FORMAT = 4,
  EAGLE_STATUS_DIMENSION = 5,
  EAGLE_STATUS_INSUFFICIENT_DATA = 6,
  EAGLE_STATUS_PANIC = 99,
} EagleStatus;

typedef enum EagleAnswer {
  EAGLE_ANSWER_NO = 0,
  EAGLE_ANSWER_YES = 1,
  EAGLE_ANSWER_UNPARSEABLE = -1,
} EagleAnswer;

/**
 * Memory bank with optional coreset provenance.
 */
typedef struct EagleBank EagleBank;

/**
 * Fitted threshold model, passed by value.
 */
typedef struct EagleThreshold {
  double mu;
  double sigma;
  double kappa;
  double tau;
  double s_max;
  size_t n;
} EagleThreshold;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *eagle_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *eagle_version(void);

/**
 * System instruction sent with every model request, as a static string.
 */
const char *eagle_system_instruction(void);

/**
 * Selects a memory bank from `n` row-major features of width `dim` by
 * greedy k-center. Rows are grouped into images of `patches_per_image`
 * consecutive rows. `projection_dim` 0 selects in the original space;
 * otherwise a seeded Gaussian projection to that width is used.
 *
 * # Safety
 * `features` must hold `n * dim` floats and `out` must be writable.
 */
enum EagleStatus eagle_bank_build(const float *features,
                                  size_t n,
                                  size_t dim,
                                  size_t patches_per_image,
                                  double target_fraction,
                                  size_t projection_dim,
                                  uint64_t seed,
                                  struct EagleBank **out);

/**
 * Wraps `n` row-major bank rows of width `dim` without selection.
 *
 * # Safety
 * `rows` must hold `n * dim` floats and `out` must be writable.
 */
enum EagleStatus eagle_bank_from_rows(const float *rows,
                                      size_t n,
                                      size_t dim,
                                      struct EagleBank **out);

/**
 * Loads a bank written by the `build` stage (`bank.eaglfeat`).
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string and `out` writable.
 */
enum EagleStatus eagle_bank_load(const char *path, struct EagleBank **out);

/**
 * # Safety
 * `bank` must be null or a handle from this library; it must not be used afterwards.
 */
void eagle_bank_free(struct EagleBank *bank);

/**
 * # Safety
 * `bank` must be a valid handle and `out` writable.
 */
enum EagleStatus eagle_bank_len(const struct EagleBank *bank, size_t *out);

/**
 * # Safety
 * `bank` must be a valid handle and `out` writable.
 */
enum EagleStatus eagle_bank_dim(const struct EagleBank *bank, size_t *out);

/**
 * Number of unsampled patches of `image`. Only banks made by
 * [`eagle_bank_build`] carry provenance.
 *
 * # Safety
 * `bank` must be a valid handle and `out` writable.
 */
enum EagleStatus eagle_bank_unsampled_count(const struct EagleBank *bank,
                                            size_t image,
                                            size_t *out);

/**
 * Exact nearest-neighbour distance of each of `n` queries to the bank.
 * `out_index` may be null.
 *
 * # Safety
 * `queries` must hold `n * dim` floats; `out_dist` (and `out_index` when
 * non-null) must hold `n` elements.
 */
enum EagleStatus eagle_bank_score(const struct EagleBank *bank,
                                  const float *queries,
                                  size_t n,
                                  size_t dim,
                                  double *out_dist,
                                  size_t *out_index);

/**
 * Fits `τ = μ + κσ` (population σ) over `n` training image scores.
 *
 * # Safety
 * `scores` must hold `n` doubles and `out` must be writable.
 */
enum EagleStatus eagle_threshold_fit(const double *scores,
                                     size_t n,
                                     double kappa,
                                     struct EagleThreshold *out);

/**
 * Writes 1 to `abnormal` when `score ≥ τ`, and 1 to `low_confidence` when
 * `τ ≤ score ≤ s_max`; 0 otherwise. Either output may be null.
 *
 * # Safety
 * `threshold` must be valid; non-null outputs must be writable.
 */
enum EagleStatus eagle_classify(const struct EagleThreshold *threshold,
                                double score,
                                int32_t *abnormal,
                                int32_t *low_confidence);

/**
 * Maps a model reply to yes/no/unparseable.
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` writable.
 */
enum EagleStatus eagle_parse_answer(const char *text, enum EagleAnswer *out);

/**
 * Multiplies the entries of an attention row whose `mask` byte is nonzero
 * by `factor`, then optionally rescales the row to sum to 1.
 *
 * # Safety
 * `row` and `mask` must each hold `len` elements.
 */
enum EagleStatus eagle_caas_scale_row(double *row,
                                      const uint8_t *mask,
                                      size_t len,
                                      double factor,
                                      bool renormalize);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EAGLE_H */
