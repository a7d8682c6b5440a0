#ifndef MVTRACK_H
#define MVTRACK_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MvtStatus {
  MVT_STATUS_OK = 0,
  MVT_STATUS_INVALID_ARGUMENT = 1,
  MVT_STATUS_IO = 2,
  MVT_STATUS_DIVERGENCE = 3,
  MVT_STATUS_NULL_POINTER = 4,
  MVT_STATUS_PANIC = 5,
} MvtStatus;

/**
 * A multi-view RGB-D video in memory.
 */
typedef struct MvtScene MvtScene;

/**
 * Loaded model weights and configuration.
 */
typedef struct MvtTracker MvtTracker;

/**
 * Prediction rows of one tracking call.
 */
typedef struct MvtTracks MvtTracks;

/**
 * A query point: track `track_id` starts at frame `t_q` at `xyz`.
 */
typedef struct MvtQuery {
  uint64_t track_id;
  uint64_t t_q;
  double xyz[3];
} MvtQuery;

/**
 * One predicted (track, frame) row.
 */
typedef struct MvtPrediction {
  uint64_t track_id;
  uint64_t t;
  double xyz[3];
  uint8_t visible;
  double confidence;
} MvtPrediction;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *mvt_last_error(void);

/**
 * Library version as a static string.
 */
const char *mvt_version(void);

/**
 * Write a synthetic dataset with default settings apart from the arguments.
 *
 * # Safety
 * `out_dir` must be a valid NUL-terminated path.
 */
enum MvtStatus mvt_simulate(const char *out_dir,
                            uint32_t n_scenes,
                            uint32_t n_views,
                            uint32_t n_frames,
                            uint64_t seed);

/**
 * Load a checkpoint written by `train`.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum MvtStatus mvt_tracker_load(const char *path, struct MvtTracker **out);

/**
 * Override window length and refinement iterations; 0 keeps the current value.
 *
 * # Safety
 * `t` is null or a handle from [`mvt_tracker_load`].
 */
enum MvtStatus mvt_tracker_configure(struct MvtTracker *t, uint32_t window, uint32_t iterations);

/**
 * # Safety
 * `t` is null or a handle from [`mvt_tracker_load`] not yet freed.
 */
void mvt_tracker_free(struct MvtTracker *t);

/**
 * Load a scene directory; its `queries.csv` is read when present.
 *
 * # Safety
 * `dir` must be a valid path string; `depth_source` may be null for "depth".
 */
enum MvtStatus mvt_scene_load(const char *dir, const char *depth_source, struct MvtScene **out);

/**
 * # Safety
 * `s` is null or a handle from [`mvt_scene_load`].
 */
uint64_t mvt_scene_num_frames(const struct MvtScene *s);

/**
 * # Safety
 * `s` is null or a handle from [`mvt_scene_load`].
 */
uint64_t mvt_scene_num_views(const struct MvtScene *s);

/**
 * Queries read from the scene's `queries.csv`.
 *
 * # Safety
 * `s` is null or a handle from [`mvt_scene_load`].
 */
uint64_t mvt_scene_num_queries(const struct MvtScene *s);

/**
 * # Safety
 * `s` is a scene handle and `out` a valid pointer.
 */
enum MvtStatus mvt_scene_get_query(const struct MvtScene *s, uint64_t i, struct MvtQuery *out);

/**
 * # Safety
 * `s` is null or a handle from [`mvt_scene_load`] not yet freed.
 */
void mvt_scene_free(struct MvtScene *s);

/**
 * Track `n` queries through the scene. A null `queries` with `n == 0` uses the
 * scene's own query file.
 *
 * # Safety
 * Handles must be live; `queries` must point to `n` readable elements.
 */
enum MvtStatus mvt_track(const struct MvtTracker *t,
                         const struct MvtScene *s,
                         const struct MvtQuery *queries,
                         uint64_t n,
                         struct MvtTracks **out);

/**
 * # Safety
 * `r` is null or a handle from [`mvt_track`].
 */
uint64_t mvt_tracks_len(const struct MvtTracks *r);

/**
 * # Safety
 * `r` is a handle from [`mvt_track`] and `out` a valid pointer.
 */
enum MvtStatus mvt_tracks_get(const struct MvtTracks *r, uint64_t i, struct MvtPrediction *out);

/**
 * Write rows in the predictions CSV format.
 *
 * # Safety
 * `r` is a handle from [`mvt_track`]; `path` a valid path string.
 */
enum MvtStatus mvt_tracks_write_csv(const struct MvtTracks *r, const char *path);

/**
 * # Safety
 * `r` is null or a handle from [`mvt_track`] not yet freed.
 */
void mvt_tracks_free(struct MvtTracks *r);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MVTRACK_H */
