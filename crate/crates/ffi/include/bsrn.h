#ifndef BSRN_H
#define BSRN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BsrnStatus {
  BSRN_STATUS_OK = 0,
  BSRN_STATUS_NULL_POINTER = 1,
  BSRN_STATUS_INVALID_ARGUMENT = 2,
  BSRN_STATUS_SHAPE = 3,
  BSRN_STATUS_CONFIG = 4,
  BSRN_STATUS_PARSE = 5,
  BSRN_STATUS_IO = 6,
  BSRN_STATUS_METRIC = 7,
  BSRN_STATUS_BUFFER_TOO_SMALL = 8,
  BSRN_STATUS_PANIC = 9,
} BsrnStatus;

/**
 * Opaque model handle.
 */
typedef struct BsrnModel BsrnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty if none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *bsrn_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *bsrn_version(void);

/**
 * Builds a freshly initialized model. `scales` lists `n_scales` factors
 * from {2, 3, 4}.
 *
 * # Safety
 * `scales` must point to `n_scales` readable values and `out` must be writable.
 */
enum BsrnStatus bsrn_model_new(uint32_t channels,
                               uint32_t state_channels,
                               uint32_t recursions,
                               uint32_t freq_control,
                               const uint32_t *scales,
                               size_t n_scales,
                               uint64_t seed,
                               struct BsrnModel **out);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` must be writable.
 */
enum BsrnStatus bsrn_model_load(const char *path, struct BsrnModel **out);

/**
 * Writes the model, including optimizer state, as a checkpoint file.
 *
 * # Safety
 * `model` must come from this library and `path` must be NUL-terminated.
 */
enum BsrnStatus bsrn_model_save(const struct BsrnModel *model, const char *path);

/**
 * Releases a model. NULL is ignored.
 *
 * # Safety
 * `model` must come from this library and must not be used afterwards.
 */
void bsrn_model_free(struct BsrnModel *model);

/**
 * Writes the recursion count R, the default interval r and the number of
 * optimizer updates behind this model. Any output pointer may be NULL.
 *
 * # Safety
 * `model` must come from this library; non-null outputs must be writable.
 */
enum BsrnStatus bsrn_model_info(const struct BsrnModel *model,
                                uint32_t *recursions,
                                uint32_t *freq_control,
                                uint64_t *global_step);

/**
 * Parameters on one scale's path of a `channels`/`state_channels` model.
 *
 * # Safety
 * `out` must be writable.
 */
enum BsrnStatus bsrn_count_params(uint32_t channels,
                                  uint32_t state_channels,
                                  uint32_t scale,
                                  size_t *out);

/**
 * Upscales a planar RGB image by `scale`. `freq_control` 0 keeps the
 * model's interval. `output` must hold `3·(scale·height)·(scale·width)`
 * floats; `output_len` is its capacity. `head_evaluations` may be NULL.
 *
 * # Safety
 * `input` must hold `3·height·width` floats and `output` `output_len` floats.
 */
enum BsrnStatus bsrn_upscale(const struct BsrnModel *model,
                             const float *input,
                             size_t height,
                             size_t width,
                             uint32_t scale,
                             uint32_t freq_control,
                             float *output,
                             size_t output_len,
                             size_t *head_evaluations);

/**
 * Y-channel PSNR of two planar RGB images after removing `shave` border
 * pixels. Identical images give +infinity.
 *
 * # Safety
 * `a` and `b` must each hold `3·height·width` floats; `out` must be writable.
 */
enum BsrnStatus bsrn_psnr(const float *a,
                          const float *b,
                          size_t height,
                          size_t width,
                          size_t shave,
                          double *out);

/**
 * Y-channel SSIM of two planar RGB images after removing `shave` border pixels.
 *
 * # Safety
 * `a` and `b` must each hold `3·height·width` floats; `out` must be writable.
 */
enum BsrnStatus bsrn_ssim(const float *a,
                          const float *b,
                          size_t height,
                          size_t width,
                          size_t shave,
                          double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BSRN_H */
