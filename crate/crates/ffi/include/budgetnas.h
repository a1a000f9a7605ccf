#ifndef BUDGETNAS_H
#define BUDGETNAS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum BnStatus {
  BN_STATUS_OK = 0,
  BN_STATUS_NULL_POINTER = 1,
  BN_STATUS_INVALID_UTF8 = 2,
  BN_STATUS_INVALID_INPUT = 3,
  BN_STATUS_CONFIG = 4,
  BN_STATUS_VALIDATION = 5,
  BN_STATUS_PARSE = 6,
  BN_STATUS_COVERAGE = 7,
  BN_STATUS_IO = 8,
  BN_STATUS_NUMERIC = 9,
  BN_STATUS_DIVERGED = 10,
  BN_STATUS_INTERNAL = 11,
  BN_STATUS_PANIC = 12,
} BnStatus;

/**
 * An architecture-parameter snapshot.
 */
typedef struct BnAlphas BnAlphas;

/**
 * A derived or loaded genotype.
 */
typedef struct BnGenotype BnGenotype;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failing call on this thread, or NULL. Valid until the
 * next failing call on the same thread; do not free.
 */
const char *bn_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *bn_version(void);

/**
 * Frees a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void bn_string_free(char *s);

/**
 * Parses a genotype JSON document.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum BnStatus bn_genotype_from_json(const char *json, struct BnGenotype **out);

/**
 * Serializes a genotype; free the result with `bn_string_free`.
 *
 * # Safety
 * `g` must be a live handle; `out` must be writable.
 */
enum BnStatus bn_genotype_to_json(const struct BnGenotype *g, char **out);

/**
 * Releases a genotype. NULL is ignored.
 *
 * # Safety
 * `g` must come from this library and not have been freed.
 */
void bn_genotype_free(struct BnGenotype *g);

/**
 * Whether the normal cell holds at most two skip-connects, and how many it holds.
 *
 * # Safety
 * `g` must be a live handle; the outputs must be writable.
 */
enum BnStatus bn_genotype_validity(const struct BnGenotype *g, bool *valid, size_t *skip_count);

/**
 * Parameter count of the evaluation network for `g` at the given size.
 *
 * # Safety
 * `g` must be a live handle; `out` must be writable.
 */
enum BnStatus bn_genotype_param_count(const struct BnGenotype *g,
                                      size_t depth,
                                      size_t init_channels,
                                      size_t num_classes,
                                      uint64_t *out);

/**
 * Parses an α snapshot.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum BnStatus bn_alphas_from_json(const char *json, struct BnAlphas **out);

/**
 * Releases an α snapshot. NULL is ignored.
 *
 * # Safety
 * `a` must come from this library and not have been freed.
 */
void bn_alphas_free(struct BnAlphas *a);

/**
 * Derives the discrete genotype of an α snapshot, recorded at the given
 * evaluation width and depth.
 *
 * # Safety
 * `a` must be a live handle; `out` must be writable.
 */
enum BnStatus bn_alphas_derive(const struct BnAlphas *a,
                               size_t init_channels,
                               size_t depth,
                               struct BnGenotype **out);

/**
 * Expected cost `Σ softmax(α)_i c_i` of one edge with `k` candidates and,
 * when `grad` is not NULL, its gradient with respect to α (length `k`).
 *
 * # Safety
 * `alpha` and `costs` must point to `k` doubles; `grad`, if not NULL, to `k`
 * writable doubles; `cost` must be writable.
 */
enum BnStatus bn_expected_cost(const double *alpha,
                               const double *costs,
                               size_t k,
                               double *cost,
                               double *grad);

/**
 * Parameters of one primitive op, named as in genotype files
 * (e.g. `"sep_conv_3x3"`), at `channels` and `stride` (1 or 2).
 *
 * # Safety
 * `op` must be a NUL-terminated string; `out` must be writable.
 */
enum BnStatus bn_primitive_param_count(const char *op,
                                       size_t channels,
                                       size_t stride,
                                       uint64_t *out);

/**
 * Runs the three-way expected-cost gradient check over `cases` random
 * cases and reports the number that failed.
 *
 * # Safety
 * `failures` must be writable.
 */
enum BnStatus bn_gradcheck(uint64_t seed, size_t cases, size_t *failures);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BUDGETNAS_H */
