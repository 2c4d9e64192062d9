/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef SLANC_H
#define SLANC_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum {
  SLANC_STATUS_OK = 0,
  SLANC_STATUS_NULL_POINTER = 1,
  SLANC_STATUS_INVALID_ARGUMENT = 2,
  SLANC_STATUS_IO = 3,
  SLANC_STATUS_MODEL = 4,
  /**
   * A scale came out below the smallest binary16 subnormal.
   */
  SLANC_STATUS_DEGENERATE = 5,
  SLANC_STATUS_NUMERICAL = 6,
  SLANC_STATUS_PANIC = 7,
} SlancStatus;

typedef enum {
  SLANC_FORMULA_UNIT = 0,
  SLANC_FORMULA_STANDARD_MLP = 1,
  SLANC_FORMULA_LLAMA_MLP = 2,
  SLANC_FORMULA_ATTENTION = 3,
  SLANC_FORMULA_DYNAMIC = 4,
} SlancFormula;

/**
 * Opaque model handle.
 */
typedef struct SlancModel SlancModel;

/**
 * Opaque scale-table handle.
 */
typedef struct SlancScaleTable SlancScaleTable;

/**
 * Result of a binary16 sum of squares.
 */
typedef struct {
  /**
   * Final binary16 sum as raw bits.
   */
  uint16_t sum_bits;
  bool overflowed;
  bool underflowed_to_zero;
  /**
   * Exact sum of the squares in double precision.
   */
  double exact_sum;
} SlancAccumulation;

/**
 * One scale-table entry. `norm_id` is owned by the table and stays valid
 * until the table is freed.
 */
typedef struct {
  const char *norm_id;
  int64_t layer_index;
  SlancFormula formula;
  double s;
  double reciprocal;
  double epsilon_adjusted;
} SlancScaleEntry;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the last failure on this thread, or an empty string.
 * Valid until the next call into this library on the same thread.
 */
const char *slanc_last_error(void);

/**
 * Round-to-nearest-even conversion of a double to binary16 bits.
 */
uint16_t slanc_fp16_encode(double x);

double slanc_fp16_decode(uint16_t bits);

uint16_t slanc_fp16_add(uint16_t a, uint16_t b);

uint16_t slanc_fp16_sub(uint16_t a, uint16_t b);

uint16_t slanc_fp16_mul(uint16_t a, uint16_t b);

uint16_t slanc_fp16_div(uint16_t a, uint16_t b);

uint16_t slanc_fp16_sqrt(uint16_t a);

/**
 * Left-to-right binary16 sum of squares of `len` values.
 *
 * # Safety
 * `values` points to `len` readable values and `out` is writable.
 */
SlancStatus slanc_fp16_sum_of_squares(const uint16_t *values, size_t len, SlancAccumulation *out);

/**
 * Load a model from a safetensors file. `name_map_json` and `config_json`
 * may be null to use the Llama naming and the file's own config.
 *
 * # Safety
 * String arguments are null or NUL-terminated; `out` is writable.
 */
SlancStatus slanc_model_load(const char *path,
                             const char *name_map_json,
                             const char *config_json,
                             SlancModel **out);

/**
 * Generate a seeded synthetic model with every weight drawn at `std`.
 *
 * # Safety
 * `config_json` is NUL-terminated; `out` is writable.
 */
SlancStatus slanc_model_generate(const char *config_json,
                                 double std,
                                 uint64_t seed,
                                 SlancModel **out);

/**
 * # Safety
 * `model` is null or came from this library and is not used afterwards.
 */
void slanc_model_free(SlancModel *model);

/**
 * Number of norms in the model, 0 for a null handle.
 *
 * # Safety
 * `model` is null or a live handle.
 */
size_t slanc_model_norm_count(const SlancModel *model);

/**
 * Hex SHA-256 weight fingerprint, or null for a null handle.
 *
 * # Safety
 * `model` is null or a live handle.
 */
char *slanc_model_fingerprint(const SlancModel *model);

/**
 * # Safety
 * `model` is a live handle and `out` is writable.
 */
SlancStatus slanc_scales_compute(const SlancModel *model, SlancScaleTable **out);

/**
 * Number of entries, 0 for a null handle.
 *
 * # Safety
 * `table` is null or a live handle.
 */
size_t slanc_scales_len(const SlancScaleTable *table);

/**
 * # Safety
 * `table` is a live handle and `out` is writable.
 */
SlancStatus slanc_scales_get(const SlancScaleTable *table, size_t index, SlancScaleEntry *out);

/**
 * The table as JSON, or null for a null handle.
 *
 * # Safety
 * `table` is null or a live handle.
 */
char *slanc_scales_to_json(const SlancScaleTable *table);

/**
 * # Safety
 * `table` is null or came from this library and is not used afterwards.
 */
void slanc_scales_free(SlancScaleTable *table);

/**
 * # Safety
 * `s` is null or a string returned by this library.
 */
void slanc_string_free(char *s);

/**
 * Binary16 forward pass over `n_tokens` seeded Gaussian tokens; counts
 * (norm, token) pairs whose sum of squares overflowed or underflowed.
 * `table` may be null for an unscaled run.
 *
 * # Safety
 * `model` is a live handle, `table` is null or a live handle, and the out
 * pointers are writable.
 */
SlancStatus slanc_audit_overflow_count(const SlancModel *model,
                                       const SlancScaleTable *table,
                                       size_t n_tokens,
                                       uint64_t seed,
                                       size_t *out_overflow,
                                       size_t *out_underflow);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SLANC_H */
