#ifndef SPLATCAL_H
#define SPLATCAL_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result of every fallible call.
typedef enum SplatcalStatus {
  SPLATCAL_STATUS_OK = 0,
  // A required pointer argument was null.
  SPLATCAL_STATUS_NULL_ARGUMENT = 1,
  // Invalid configuration or argument value.
  SPLATCAL_STATUS_CONFIG = 2,
  // File, parse or format failure.
  SPLATCAL_STATUS_IO = 3,
  // No camera could be optimized (nothing visible) or a non-finite value.
  SPLATCAL_STATUS_NUMERICAL = 4,
  // Index out of range or caller buffer too small.
  SPLATCAL_STATUS_OUT_OF_RANGE = 5,
  // Internal failure; the library state is unchanged.
  SPLATCAL_STATUS_PANIC = 6,
} SplatcalStatus;

// Ordered cameras with the reconstruction they were read from.
typedef struct SplatcalCameras SplatcalCameras;

// Run configuration (JSON document with defaults).
typedef struct SplatcalConfig SplatcalConfig;

// RGB float image, row-major, 3 values per pixel.
typedef struct SplatcalImage SplatcalImage;

// Gaussian scene.
typedef struct SplatcalScene SplatcalScene;

// Message of the last failure on this thread, or null. Valid until the
// next failing call on the same thread.
const char *splatcal_last_error(void);

// Library version, a static string.
const char *splatcal_version(void);

// Frees a string returned by this library.
//
// # Safety
// `s` must come from this library or be null.
void splatcal_string_free(char *s);

// Synthetic scene. `layout` is `cloud`, `grid`, `textured_wall` or
// `wall_and_cloud`.
//
// # Safety
// `layout` must be a valid C string; `out` a valid pointer.
enum SplatcalStatus splatcal_scene_synth(uint64_t seed,
                                         size_t n,
                                         const char *layout,
                                         struct SplatcalScene **out);

// # Safety
// `path` must be a valid C string; `out` a valid pointer.
enum SplatcalStatus splatcal_scene_load_ply(const char *path, struct SplatcalScene **out);

// # Safety
// `scene` must be a live handle; `path` a valid C string.
enum SplatcalStatus splatcal_scene_save_ply(const struct SplatcalScene *scene, const char *path);

// Number of gaussians; 0 for a null handle.
//
// # Safety
// `scene` must be a live handle or null.
size_t splatcal_scene_len(const struct SplatcalScene *scene);

// Scene radius about the centroid; NaN for a null handle.
//
// # Safety
// `scene` must be a live handle or null.
double splatcal_scene_extent(const struct SplatcalScene *scene);

// # Safety
// `scene` must come from this library or be null, and is invalid after.
void splatcal_scene_free(struct SplatcalScene *scene);

// `k` synthetic cameras framing `scene`. `rig` is `orbit` or `arc`.
//
// # Safety
// Pointers must be valid; `rig` a C string.
enum SplatcalStatus splatcal_cameras_synth(const struct SplatcalScene *scene,
                                           uint64_t seed,
                                           size_t k,
                                           const char *rig,
                                           uint32_t width,
                                           uint32_t height,
                                           struct SplatcalCameras **out);

// Reads `cameras.txt` and `images.txt` from `dir`, cameras in image-id
// order.
//
// # Safety
// `dir` must be a valid C string; `out` a valid pointer.
enum SplatcalStatus splatcal_cameras_load_colmap(const char *dir, struct SplatcalCameras **out);

// Writes the cameras as COLMAP text into `dir`, keeping ids and shared
// intrinsics of a loaded reconstruction.
//
// # Safety
// `cams` must be a live handle; `dir` a valid C string.
enum SplatcalStatus splatcal_cameras_save_colmap(const struct SplatcalCameras *cams,
                                                 const char *dir);

// # Safety
// `cams` must be a live handle or null.
size_t splatcal_cameras_len(const struct SplatcalCameras *cams);

// World-to-camera pose and fields of view of camera `i`: `q` = (w, x, y,
// z), `t`, `fov` = (x, y) radians. `size` receives (width, height); any
// output may be null.
//
// # Safety
// Non-null outputs must hold 4, 3, 2 and 2 elements.
enum SplatcalStatus splatcal_cameras_get(const struct SplatcalCameras *cams,
                                         size_t i,
                                         double *q,
                                         double *t,
                                         double *fov,
                                         uint32_t *size);

// Sets pose and fields of view of camera `i`; the camera is validated and
// left unchanged on failure.
//
// # Safety
// `q`, `t` and `fov` must hold 4, 3 and 2 elements.
enum SplatcalStatus splatcal_cameras_set(struct SplatcalCameras *cams,
                                         size_t i,
                                         const double *q,
                                         const double *t,
                                         const double *fov);

// Perturbs every camera; camera `k` uses seed `seed + k`. `dt` in scene
// units, `dtheta` in radians, `dfov` relative.
//
// # Safety
// `cams` must be a live handle.
enum SplatcalStatus splatcal_cameras_perturb(struct SplatcalCameras *cams,
                                             uint64_t seed,
                                             double dt,
                                             double dtheta,
                                             double dfov);

// # Safety
// `cams` must come from this library or be null, and is invalid after.
void splatcal_cameras_free(struct SplatcalCameras *cams);

// Defaults, or the JSON document `json` (null for defaults) overlaid on
// them. Unknown keys are rejected.
//
// # Safety
// `json` must be a valid C string or null; `out` a valid pointer.
enum SplatcalStatus splatcal_config_new(const char *json, struct SplatcalConfig **out);

// Applies one `key=value` override (dotted key, JSON value).
//
// # Safety
// `config` must be a live handle; `assignment` a valid C string.
enum SplatcalStatus splatcal_config_set(struct SplatcalConfig *config, const char *assignment);

// The effective configuration as JSON; free with `splatcal_string_free`.
//
// # Safety
// `config` must be a live handle; `out` a valid pointer.
enum SplatcalStatus splatcal_config_to_json(const struct SplatcalConfig *config, char **out);

// # Safety
// `config` must come from this library or be null, and is invalid after.
void splatcal_config_free(struct SplatcalConfig *config);

// Renders camera `i` of `cams` with the render settings of `config`
// (defaults when null).
//
// # Safety
// Handles must be live; `out` a valid pointer.
enum SplatcalStatus splatcal_render(const struct SplatcalScene *scene,
                                    const struct SplatcalCameras *cams,
                                    size_t i,
                                    const struct SplatcalConfig *config,
                                    struct SplatcalImage **out);

// Reads a PPM (P6) or PFM image.
//
// # Safety
// `path` must be a valid C string; `out` a valid pointer.
enum SplatcalStatus splatcal_image_load(const char *path, struct SplatcalImage **out);

// Writes PPM or PFM, chosen by the extension of `path`.
//
// # Safety
// `image` must be a live handle; `path` a valid C string.
enum SplatcalStatus splatcal_image_save(const struct SplatcalImage *image, const char *path);

// Width and height; either output may be null.
//
// # Safety
// `image` must be a live handle.
enum SplatcalStatus splatcal_image_size(const struct SplatcalImage *image,
                                        uint32_t *width,
                                        uint32_t *height);

// Copies `3·width·height` values into `buf` of capacity `len`.
//
// # Safety
// `buf` must hold `len` doubles.
enum SplatcalStatus splatcal_image_read_pixels(const struct SplatcalImage *image,
                                               double *buf,
                                               size_t len);

// Image from `3·width·height` row-major RGB values.
//
// # Safety
// `data` must hold `3·width·height` doubles; `out` a valid pointer.
enum SplatcalStatus splatcal_image_from_pixels(uint32_t width,
                                               uint32_t height,
                                               const double *data,
                                               struct SplatcalImage **out);

// # Safety
// `image` must come from this library or be null, and is invalid after.
void splatcal_image_free(struct SplatcalImage *image);

// Loss gradient of camera `i` against `target`, using the configured
// camera loss. `grad` receives 9 values: translation (3), quaternion
// (w, x, y, z), fields of view (x, y).
//
// # Safety
// Handles must be live; `grad` must hold 9 doubles.
enum SplatcalStatus splatcal_grad_camera(const struct SplatcalScene *scene,
                                         const struct SplatcalCameras *cams,
                                         size_t i,
                                         const struct SplatcalImage *target,
                                         const struct SplatcalConfig *config,
                                         double *grad);

// Refines `scene` and all cameras against `targets` (one per camera, in
// camera order) with the schedule of `config` (defaults when null).
// `heldout` may be null or hold one flag per camera; held-out cameras
// are not used to train the scene. On success `report_json`, if not
// null, receives the report; free it with `splatcal_string_free`.
//
// # Safety
// Handles must be live; `targets` must hold `n_targets` live images.
enum SplatcalStatus splatcal_calibrate(struct SplatcalScene *scene,
                                       struct SplatcalCameras *cams,
                                       const struct SplatcalImage *const *targets,
                                       size_t n_targets,
                                       const bool *heldout,
                                       const struct SplatcalConfig *config,
                                       char **report_json);

#endif  /* SPLATCAL_H */
