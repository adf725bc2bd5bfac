#ifndef MIPKD_H
#define MIPKD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MipkdArch {
  MIPKD_ARCH_EDSR = 0,
  MIPKD_ARCH_RCAN = 1,
} MipkdArch;

typedef enum MipkdStatus {
  MIPKD_STATUS_OK = 0,
  MIPKD_STATUS_NULL_POINTER = 1,
  MIPKD_STATUS_INVALID_ARGUMENT = 2,
  MIPKD_STATUS_IO = 3,
  MIPKD_STATUS_FORMAT = 4,
  MIPKD_STATUS_DIMENSION = 5,
  MIPKD_STATUS_INTERNAL = 6,
} MipkdStatus;

/**
 * Opaque model handle.
 */
typedef struct MipkdModel MipkdModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next failing call on this thread.
 */
const char *mipkd_last_error(void);

/**
 * Loads a checkpoint (network or bicubic pseudo-checkpoint).
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum MipkdStatus mipkd_model_load(const char *path, struct MipkdModel **out);

/**
 * Builds a freshly initialised network; `arch` is a [`MipkdArch`] value and
 * `groups` is ignored for EDSR.
 *
 * # Safety
 * `out` must be a writable pointer.
 */
enum MipkdStatus mipkd_model_build(uint32_t arch,
                                   uint32_t channels,
                                   uint32_t blocks,
                                   uint32_t groups,
                                   uint32_t scale,
                                   uint64_t seed,
                                   struct MipkdModel **out);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void mipkd_model_free(struct MipkdModel *model);

/**
 * Upscaling factor, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uint32_t mipkd_model_scale(const struct MipkdModel *model);

/**
 * Number of scalar parameters, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uint64_t mipkd_model_param_count(const struct MipkdModel *model);

/**
 * Upscales `n` RGB images of `h x w`. `output` must hold
 * `n * 3 * (h * scale) * (w * scale)` floats.
 *
 * # Safety
 * `input` must point to `n * 3 * h * w` floats and `output` to `output_len`
 * writable floats.
 */
enum MipkdStatus mipkd_model_upscale(const struct MipkdModel *model,
                                     const float *input,
                                     size_t n,
                                     size_t h,
                                     size_t w,
                                     float *output,
                                     size_t output_len);

/**
 * Luma PSNR (dB, capped at 100) of two `3 x h x w` images after shaving
 * `border` pixels per side.
 *
 * # Safety
 * `a` and `b` must point to `3 * h * w` floats; `out` must be writable.
 */
enum MipkdStatus mipkd_psnr(const float *a,
                            const float *b,
                            size_t h,
                            size_t w,
                            size_t border,
                            double *out);

/**
 * Luma SSIM of two `3 x h x w` images after shaving `border` pixels per side.
 *
 * # Safety
 * As [`mipkd_psnr`].
 */
enum MipkdStatus mipkd_ssim(const float *a,
                            const float *b,
                            size_t h,
                            size_t w,
                            size_t border,
                            double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MIPKD_H */
