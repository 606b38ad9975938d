#ifndef FLOWTRACE_H
#define FLOWTRACE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes of every fallible call.
 */
typedef enum FtStatus {
  FT_STATUS_OK = 0,
  FT_STATUS_NULL_POINTER = 1,
  FT_STATUS_INVALID_ARGUMENT = 2,
  FT_STATUS_DIMENSION = 3,
  FT_STATUS_DOMAIN = 4,
  FT_STATUS_CONFIG = 5,
  FT_STATUS_SHAPE = 6,
  FT_STATUS_FORMAT = 7,
  FT_STATUS_CHECKPOINT_MISMATCH = 8,
  FT_STATUS_IO = 9,
  FT_STATUS_NON_FINITE = 10,
  FT_STATUS_INTERNAL = 11,
  FT_STATUS_PANIC = 12,
} FtStatus;

/**
 * Opaque model handle.
 */
typedef struct FtModel FtModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next call into this library on the same thread.
 */
const char *ft_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ft_version(void);

/**
 * Loads a checkpoint written by `flowtrace train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer. On
 * success `*out` owns a handle that must be released with `ft_model_free`.
 */
enum FtStatus ft_model_load(const char *path, struct FtModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from `ft_model_load` and not have been freed.
 */
void ft_model_free(struct FtModel *model);

/**
 * Image side length the model was trained on.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum FtStatus ft_model_image_size(const struct FtModel *model, uint32_t *out);

/**
 * Predicts a forgery probability map.
 *
 * `image` holds `3 * height * width` floats in `[0, 1]`, channel-major
 * (all R, then G, then B). `out_probs` receives `height * width` floats.
 *
 * # Safety
 * Both buffers must be valid for the stated lengths.
 */
enum FtStatus ft_model_predict(const struct FtModel *model,
                               const float *image,
                               size_t height,
                               size_t width,
                               uint64_t noise_seed,
                               float *out_probs);

/**
 * Pixel F1 and IoU of two binary masks (bytes 0 or 1, row-major).
 *
 * # Safety
 * `pred` and `gt` must hold `height * width` bytes; `f1` and `iou` must be
 * valid pointers.
 */
enum FtStatus ft_f1_iou(const uint8_t *pred,
                        const uint8_t *gt,
                        size_t height,
                        size_t width,
                        double *f1,
                        double *iou);

/**
 * Timestep shift `s·t / (1 + (s − 1)·t)`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum FtStatus ft_shift_warp(double t, double s, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FLOWTRACE_H */
