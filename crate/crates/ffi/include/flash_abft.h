/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef FLASH_ABFT_H
#define FLASH_ABFT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FabftStatus {
  FABFT_STATUS_OK = 0,
  FABFT_STATUS_NULL_POINTER = 1,
  FABFT_STATUS_INVALID_ARGUMENT = 2,
  FABFT_STATUS_DIMENSION = 3,
  FABFT_STATUS_INVALID_FAULT = 4,
  FABFT_STATUS_CONFIG = 5,
  FABFT_STATUS_IO = 6,
  FABFT_STATUS_PARSE = 7,
  FABFT_STATUS_INTERNAL = 8,
} FabftStatus;

typedef enum FabftCategory {
  FABFT_CATEGORY_DETECTED = 0,
  FABFT_CATEGORY_FALSE_POSITIVE = 1,
  FABFT_CATEGORY_SILENT = 2,
  FABFT_CATEGORY_MASKED = 3,
} FabftCategory;

/**
 * Opaque matrix handle.
 */
typedef struct FabftMatrix FabftMatrix;

/**
 * Kernel shape comes from the operands; these are the remaining knobs.
 * Format codes: 1 bf16, 2 fp32, 3 fp64.
 */
typedef struct FabftKernelOptions {
  size_t block_size;
  uint16_t datapath;
  uint16_t output_accum;
  uint16_t stats;
  bool flush_subnormals;
  bool scale_scores;
} FabftKernelOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. Valid until
 * the next failing call on the same thread.
 */
const char *fabft_last_error(void);

/**
 * Static version string.
 */
const char *fabft_version(void);

/**
 * Default options: 16 lanes, bf16 datapath, fp32 output accumulators.
 */
struct FabftKernelOptions fabft_default_options(void);

/**
 * Copies `rows * cols` row-major values into a new matrix.
 *
 * # Safety
 * `data` must point to `rows * cols` readable doubles; `out` must be writable.
 */
enum FabftStatus fabft_matrix_new(size_t rows,
                                  size_t cols,
                                  const double *data,
                                  struct FabftMatrix **out);

/**
 * # Safety
 * `m` must be NULL or a handle from this library that is not used again.
 */
void fabft_matrix_free(struct FabftMatrix *m);

/**
 * # Safety
 * `m` must be a live handle.
 */
size_t fabft_matrix_rows(const struct FabftMatrix *m);

/**
 * # Safety
 * `m` must be a live handle.
 */
size_t fabft_matrix_cols(const struct FabftMatrix *m);

/**
 * Copies the row-major contents into `out`, which holds `len` doubles.
 *
 * # Safety
 * `m` must be a live handle and `out` must point to `len` writable doubles.
 */
enum FabftStatus fabft_matrix_copy_data(const struct FabftMatrix *m, double *out, size_t len);

/**
 * Reads a FABFT1 matrix file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum FabftStatus fabft_matrix_read(const char *path, struct FabftMatrix **out);

/**
 * Writes a FABFT1 matrix file with elements in `format_code`.
 *
 * # Safety
 * `m` must be a live handle and `path` a NUL-terminated string.
 */
enum FabftStatus fabft_matrix_write(const struct FabftMatrix *m,
                                    const char *path,
                                    uint16_t format_code);

/**
 * Nearest bf16 value (ties to even).
 */
double fabft_round_bf16(double x);

uint16_t fabft_round_bf16_bits(double x);

/**
 * Dense fp64 softmax(QK^T)V.
 *
 * # Safety
 * All handles must be live; `opts` readable; `out` writable.
 */
enum FabftStatus fabft_reference_attention(const struct FabftMatrix *q,
                                           const struct FabftMatrix *k,
                                           const struct FabftMatrix *v,
                                           const struct FabftKernelOptions *opts,
                                           struct FabftMatrix **out);

/**
 * Blocked FlashAttention-2 schedule without the checker.
 *
 * # Safety
 * All handles must be live; `opts` readable; `out` writable.
 */
enum FabftStatus fabft_flash_attention(const struct FabftMatrix *q,
                                       const struct FabftMatrix *k,
                                       const struct FabftMatrix *v,
                                       const struct FabftKernelOptions *opts,
                                       struct FabftMatrix **out);

/**
 * FlashAttention-2 with the fused checksum; writes the output and the
 * predicted checksum.
 *
 * # Safety
 * All handles must be live; `opts` readable; `out` and `predicted` writable.
 */
enum FabftStatus fabft_fused_attention(const struct FabftMatrix *q,
                                       const struct FabftMatrix *k,
                                       const struct FabftMatrix *v,
                                       const struct FabftKernelOptions *opts,
                                       struct FabftMatrix **out,
                                       double *predicted);

/**
 * Sum of every element of `o`.
 *
 * # Safety
 * `o` must be a live handle and `out` writable.
 */
enum FabftStatus fabft_actual_checksum(const struct FabftMatrix *o, double *out);

/**
 * True when the checker raises a flag.
 */
bool fabft_compare(double predicted, double actual, double tolerance, bool nan_aware);

/**
 * Calibrated tolerance for a JSON campaign config.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string; `tolerance` writable.
 */
enum FabftStatus fabft_calibrate_tolerance(const char *config_json,
                                           size_t num_trials,
                                           double *tolerance);

/**
 * Runs the campaigns described by a JSON config and returns the report as
 * JSON.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string; `report_json` writable.
 */
enum FabftStatus fabft_run_campaigns(const char *config_json, char **report_json);

/**
 * Replays a JSON fault list (one object or an array) and classifies it.
 *
 * # Safety
 * All handles must be live; `faults_json` NUL-terminated; `category`
 * writable.
 */
enum FabftStatus fabft_inject(const struct FabftMatrix *q,
                              const struct FabftMatrix *k,
                              const struct FabftMatrix *v,
                              const struct FabftKernelOptions *opts,
                              const char *faults_json,
                              double tolerance,
                              bool nan_aware,
                              enum FabftCategory *category);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library, not used again.
 */
void fabft_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FLASH_ABFT_H */
