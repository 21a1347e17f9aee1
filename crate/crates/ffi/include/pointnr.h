/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef POINTNR_H
#define POINTNR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Bumped whenever a signature or struct layout changes.
 */
#define PR_ABI_VERSION 1

enum PrStatus
#ifdef __cplusplus
  : int32_t
#endif // __cplusplus
 {
  PR_STATUS_OK = 0,
  PR_STATUS_NULL_ARGUMENT = 1,
  PR_STATUS_CONFIG = 2,
  PR_STATUS_DATA = 3,
  PR_STATUS_NUMERIC = 4,
  PR_STATUS_PANIC = 5,
  PR_STATUS_BUFFER_SIZE = 6,
};
#ifndef __cplusplus
typedef int32_t PrStatus;
#endif // __cplusplus

/*
 Opaque handle to a loaded checkpoint.
 */
typedef struct PrModel PrModel;

/*
 Pinhole camera: intrinsics in pixels plus the world-to-camera transform
 `p_cam = R·p_world + t`, `R` row-major.
 */
typedef struct PrCamera {
  double fx;
  double fy;
  double cx;
  double cy;
  uint32_t width;
  uint32_t height;
  double rotation[9];
  double translation[3];
} PrCamera;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

uint32_t pr_abi_version(void);

/*
 Message for the last failed call on this thread; empty after a success.
 The pointer stays valid until the next call on the same thread.
 */
const char *pr_last_error_message(void);

/*
 Z-buffers `n_points` xyz triples at pyramid level `scale`. Both outputs
 must hold `ceil(W/2^scale)·ceil(H/2^scale)` elements, row-major;
 uncovered pixels get index -1 and depth +inf.

 # Safety
 Pointers must be valid for the stated lengths.
 */
PrStatus pr_rasterize(const float *points,
                      size_t n_points,
                      const struct PrCamera *camera_in,
                      uint32_t scale,
                      int32_t *index_out,
                      float *depth_out,
                      size_t out_len);

/*
 Loads a checkpoint directory. On success `*out` owns a handle to release
 with [`pr_model_free`].

 # Safety
 `dir` must be a NUL-terminated UTF-8 path and `out` writable.
 */
PrStatus pr_model_open(const char *dir, struct PrModel **out);

/*
 # Safety
 `model` must come from [`pr_model_open`] and not be used afterwards.
 */
void pr_model_free(struct PrModel *model);

/*
 Number of points, or 0 for a null handle.

 # Safety
 `model` must be null or a live handle.
 */
size_t pr_model_num_points(const struct PrModel *model);

/*
 Renders into `rgb_out` (`W·H·3` floats, row-major, interleaved, in [0,1]).

 # Safety
 Pointers must be valid; `rgb_out` must hold `out_len` floats.
 */
PrStatus pr_model_render(const struct PrModel *model,
                         const struct PrCamera *camera_in,
                         float *rgb_out,
                         size_t out_len);

/*
 Removes the points inside the axis-aligned box `[lo, hi]`.

 # Safety
 `lo` and `hi` must point to three floats; `removed` may be null.
 */
PrStatus pr_model_remove_box(struct PrModel *model,
                             const float *lo,
                             const float *hi,
                             size_t *removed);

/*
 PSNR in dB of two `W·H·3` interleaved images.

 # Safety
 `a` and `b` must hold `W·H·3` floats; `out` must be writable.
 */
PrStatus pr_psnr(const float *a, const float *b, uint32_t width, uint32_t height, double *out);

/*
 Channel-averaged SSIM of two `W·H·3` interleaved images.

 # Safety
 As [`pr_psnr`].
 */
PrStatus pr_ssim(const float *a, const float *b, uint32_t width, uint32_t height, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* POINTNR_H */
