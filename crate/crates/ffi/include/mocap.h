#ifndef MOCAP_H
#define MOCAP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  MOCAP_STATUS_OK = 0,
  MOCAP_STATUS_NULL_POINTER = 1,
  MOCAP_STATUS_INVALID_ARGUMENT = 2,
  MOCAP_STATUS_PARSE = 3,
  MOCAP_STATUS_IO = 4,
  MOCAP_STATUS_NON_POSITIVE_DEPTH = 5,
  MOCAP_STATUS_INSUFFICIENT_VIEWS = 6,
  MOCAP_STATUS_DEGENERATE = 7,
  MOCAP_STATUS_NUMERIC = 8,
  MOCAP_STATUS_PANIC = 9,
} MocapStatus;

/**
 * Opaque camera rig.
 */
typedef struct MocapRig MocapRig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until
 * the next call into this library on the same thread.
 */
const char *mocap_last_error(void);

/**
 * Parse a calibration document (TOML text, NUL-terminated).
 *
 * # Safety
 * `toml` must be a valid C string and `out` a valid pointer.
 */
MocapStatus mocap_rig_parse(const char *toml, MocapRig **out);

/**
 * Load a calibration file from disk.
 *
 * # Safety
 * `path` must be a valid C string and `out` a valid pointer.
 */
MocapStatus mocap_rig_load(const char *path, MocapRig **out);

/**
 * Release a rig. Null is ignored.
 *
 * # Safety
 * `rig` must come from `mocap_rig_parse`/`mocap_rig_load` and not be used afterwards.
 */
void mocap_rig_free(MocapRig *rig);

/**
 * Number of cameras in the rig, 0 for null.
 *
 * # Safety
 * `rig` must be null or a live handle.
 */
size_t mocap_rig_camera_count(const MocapRig *rig);

/**
 * Project a world point into camera `camera`, writing `uv[2]` pixels.
 *
 * # Safety
 * `xyz` must point to 3 doubles and `uv` to 2.
 */
MocapStatus mocap_rig_project(const MocapRig *rig, size_t camera, const double *xyz, double *uv);

/**
 * Triangulate one point from `n` views. `cameras[i]` is a camera index,
 * `uv[2i..2i+2]` its pixel and `confidence[i]` its score (null means all
 * 1.0). Writes `xyz[3]` and, if non-null, the mean reprojection error.
 *
 * # Safety
 * Array arguments must hold the documented number of elements.
 */
MocapStatus mocap_rig_triangulate(const MocapRig *rig,
                                  size_t n,
                                  const size_t *cameras,
                                  const double *uv,
                                  const double *confidence,
                                  double min_confidence,
                                  double *xyz,
                                  double *mean_error_px);

/**
 * Log dimensionless jerk of `n` uniformly sampled positions (`xyz[3n]`).
 *
 * # Safety
 * `xyz` must hold `3 * n` doubles and `out` be valid.
 */
MocapStatus mocap_ldj(const double *xyz, size_t n, double fps, double *out);

/**
 * ICC(A,1) of an `n_subjects` × `n_raters` row-major matrix.
 *
 * # Safety
 * `ratings` must hold `n_subjects * n_raters` doubles and `out` be valid.
 */
MocapStatus mocap_icc_a1(const double *ratings, size_t n_subjects, size_t n_raters, double *out);

/**
 * Convex hull volume of `n` points (`xyz[3n]`); 0 for flat sets.
 *
 * # Safety
 * `xyz` must hold `3 * n` doubles and `out` be valid.
 */
MocapStatus mocap_hull_volume(const double *xyz, size_t n, double *out);

/**
 * Angle at `b` between `a` and `c`, in degrees.
 *
 * # Safety
 * `a`, `b`, `c` must each point to 3 doubles and `out` be valid.
 */
MocapStatus mocap_joint_angle(const double *a, const double *b, const double *c, double *out);

/**
 * Find LED on/off events in a per-frame red pixel count trace. Writes up
 * to `capacity` inclusive frame pairs into `on`/`off` and the total number
 * found into `n_events`.
 *
 * # Safety
 * `counts` must hold `n` values; `on` and `off` must hold `capacity` values.
 */
MocapStatus mocap_detect_events(const uint32_t *counts,
                                size_t n,
                                uint32_t pixel_threshold,
                                size_t debounce,
                                size_t *on,
                                size_t *off,
                                size_t capacity,
                                size_t *n_events);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MOCAP_H */
