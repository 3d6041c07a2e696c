/* C interface of the mvsr multi-view stereo engine. */

#pragma once

/* Generated with cbindgen:0.29.4 */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every entry point.
 */
typedef enum MvsrStatus {
  MvsrOk = 0,
  MvsrInvalidArgument = 1,
  MvsrIoError = 2,
  MvsrParseError = 3,
  MvsrCorruptFile = 4,
  MvsrVersionMismatch = 5,
  MvsrNumericError = 6,
  MvsrNoData = 7,
  MvsrNotReady = 8,
} MvsrStatus;

/**
 * Opaque engine handle.
 */
typedef struct MvsrEngine MvsrEngine;

/**
 * Aggregated 2D depth metrics.
 */
typedef struct MvsrDepthMetrics {
  double abs_rel;
  double abs_diff;
  double abs_inv;
  double sq_rel;
  double rmse;
  double delta_125;
  double delta_125_2;
  double delta_125_3;
  uint64_t pixel_count;
} MvsrDepthMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version string; static storage, do not free.
 */
const char *mvsr_version(void);

/**
 * Copy the last error message into `buf` (truncated to `len - 1` bytes,
 * always NUL-terminated). Returns the full message length.
 *
 * # Safety
 * `buf` must point to `len` writable bytes, or be null (query mode).
 */
uintptr_t mvsr_last_error_message(char *buf, uintptr_t len);

/**
 * Fresh engine with the default configuration. Free with
 * `mvsr_engine_free`.
 */
struct MvsrEngine *mvsr_engine_new(void);

/**
 * # Safety
 * `engine` must come from `mvsr_engine_new` and not be freed twice.
 */
void mvsr_engine_free(struct MvsrEngine *engine);

/**
 * Replace the configuration from a key-value file.
 *
 * # Safety
 * Pointer contracts as documented on the module.
 */
enum MvsrStatus mvsr_engine_load_config(struct MvsrEngine *engine, const char *path);

/**
 * Set one configuration option, e.g. key `"fusion.rel_tol"` value `"0.02"`.
 *
 * # Safety
 * Pointer contracts as documented on the module.
 */
enum MvsrStatus mvsr_engine_set_option(struct MvsrEngine *engine,
                                       const char *key,
                                       const char *value);

/**
 * Initialize fresh, untrained weights for the configured model.
 *
 * # Safety
 * Pointer contracts as documented on the module.
 */
enum MvsrStatus mvsr_engine_init_weights(struct MvsrEngine *engine, uint64_t seed);

/**
 * # Safety
 * Pointer contracts as documented on the module.
 */
enum MvsrStatus mvsr_engine_load_weights(struct MvsrEngine *engine, const char *path);

/**
 * # Safety
 * Pointer contracts as documented on the module.
 */
enum MvsrStatus mvsr_engine_save_weights(struct MvsrEngine *engine, const char *path);

/**
 * Write a synthetic scene directory (images, ground-truth depth, cameras).
 *
 * # Safety
 * Pointer contracts as documented on the module.
 */
enum MvsrStatus mvsr_generate_scene(uint64_t seed,
                                    uintptr_t n_boxes,
                                    uintptr_t n_frames,
                                    const char *out_dir);

/**
 * Predict full-resolution depth maps for every frame of a scene directory.
 *
 * # Safety
 * Pointer contracts as documented on the module.
 */
enum MvsrStatus mvsr_engine_predict(struct MvsrEngine *engine,
                                    const char *scene_dir,
                                    const char *out_dir,
                                    int dump_iters);

/**
 * Fuse predicted depth maps (`depth_%04d.pfm` under `depth_dir`) into a
 * binary little-endian PLY point cloud.
 *
 * # Safety
 * Pointer contracts as documented on the module.
 */
enum MvsrStatus mvsr_engine_fuse(struct MvsrEngine *engine,
                                 const char *scene_dir,
                                 const char *depth_dir,
                                 const char *out_ply);

/**
 * Depth metrics of predicted maps against the scene's ground truth.
 *
 * # Safety
 * Pointer contracts as documented on the module; `out` must point to a
 * writable [`MvsrDepthMetrics`].
 */
enum MvsrStatus mvsr_engine_eval_depth(struct MvsrEngine *engine,
                                       const char *scene_dir,
                                       const char *depth_dir,
                                       struct MvsrDepthMetrics *out);

/**
 * Train on scene directories (subdirectories with `poses.txt` each) and
 * store the final weights in the engine.
 *
 * # Safety
 * Pointer contracts as documented on the module.
 */
enum MvsrStatus mvsr_engine_train(struct MvsrEngine *engine,
                                  const char *train_dir,
                                  const char *val_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus
