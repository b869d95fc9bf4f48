#ifndef PCNN_H
#define PCNN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum PcnnStatus {
  PCNN_OK = 0,
  /**
   * A required pointer argument was null.
   */
  PCNN_ERR_NULL = 1,
  /**
   * A string argument was not valid UTF-8 or a size was out of range.
   */
  PCNN_ERR_INVALID_ARGUMENT = 2,
  PCNN_ERR_IO = 3,
  /**
   * Malformed or unsupported model file.
   */
  PCNN_ERR_FORMAT = 4,
  /**
   * Checksum mismatch.
   */
  PCNN_ERR_INTEGRITY = 5,
  /**
   * Input or output buffer does not match the model's shapes.
   */
  PCNN_ERR_SHAPE = 6,
  PCNN_ERR_UNKNOWN_ARCH = 7,
  /**
   * Any other library error.
   */
  PCNN_ERR_INTERNAL = 8,
  /**
   * A panic was caught at the boundary.
   */
  PCNN_ERR_PANIC = 9,
} PcnnStatus;

/**
 * Opaque model handle.
 */
typedef struct PcnnModel PcnnModel;

/**
 * Storage totals in bits.
 */
typedef struct PcnnMemoryReport {
  uint64_t full_bits;
  uint64_t compressed_bits;
  double ratio;
} PcnnMemoryReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Load a model (or checkpoint) file. On success `*out` receives a handle
 * that must be released with [`pcnn_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PcnnStatus pcnn_model_load(const char *path, struct PcnnModel **out);

/**
 * Load a model from an in-memory buffer.
 *
 * # Safety
 * `data` must point to `len` readable bytes and `out` must be valid.
 */
enum PcnnStatus pcnn_model_load_bytes(const uint8_t *data, size_t len, struct PcnnModel **out);

/**
 * Release a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from `pcnn_model_load*` and not be used afterwards.
 */
void pcnn_model_free(struct PcnnModel *model);

/**
 * Number of output classes, 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t pcnn_model_num_classes(const struct PcnnModel *model);

/**
 * Per-sample input dimensions.
 *
 * # Safety
 * `model` must be a live handle; `c`, `h`, `w` valid pointers.
 */
enum PcnnStatus pcnn_model_input_shape(const struct PcnnModel *model,
                                       size_t *c,
                                       size_t *h,
                                       size_t *w);

/**
 * Forward `batch` samples laid out `batch x c x h x w` (already
 * normalized) and write `batch x classes` logits.
 *
 * # Safety
 * `input` must hold `batch*c*h*w` floats and `logits` `logits_len` floats.
 */
enum PcnnStatus pcnn_model_forward(const struct PcnnModel *model,
                                   const float *input,
                                   size_t batch,
                                   float *logits,
                                   size_t logits_len);

/**
 * Storage report for a named architecture (`resnet18-like`) with `j` projections.
 *
 * # Safety
 * `arch` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PcnnStatus pcnn_memory_report(const char *arch, size_t j, struct PcnnMemoryReport *out);

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into the library on this thread.
 */
const char *pcnn_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *pcnn_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PCNN_H */
