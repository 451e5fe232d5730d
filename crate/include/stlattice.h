/* Generated by cbindgen from crates/ffi; do not edit. */

#ifndef STLATTICE_H
#define STLATTICE_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum StlStatus {
  STL_STATUS_OK = 0,
  STL_STATUS_NULL_POINTER = 1,
  STL_STATUS_INVALID_INPUT = 2,
  STL_STATUS_CONFIG = 3,
  STL_STATUS_IO = 4,
  STL_STATUS_PARSE = 5,
  STL_STATUS_RUNTIME = 6,
  STL_STATUS_PANIC = 7,
} StlStatus;

// Opaque run configuration.
typedef struct StlConfig StlConfig;

// Opaque results of `stl_run`, one report per seed.
typedef struct StlRun StlRun;

// Headline numbers of one seed's run.
typedef struct StlRunSummary {
  uint64_t seed;
  double map;
  double recall;
  double total_cost_ms;
  double effective_fps;
  size_t n_keyframes;
} StlRunSummary;

// Center-format box.
typedef struct StlBox {
  double cx;
  double cy;
  double w;
  double h;
} StlBox;

typedef struct StlDetection {
  uint32_t frame;
  uint32_t class_id;
  double score;
  struct StlBox bbox;
} StlDetection;

typedef struct StlGtBox {
  uint32_t frame;
  uint32_t class_id;
  uint32_t object_id;
  struct StlBox bbox;
} StlGtBox;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next failing call on the same thread.
const char *stl_last_error(void);

// Library version as a static NUL-terminated string.
const char *stl_version(void);

// Configuration with every default.
struct StlConfig *stl_config_default(void);

// Parses TOML text. Relative paths in it are left as given.
//
// # Safety
// `text` must be a NUL-terminated string and `out` a valid pointer.
enum StlStatus stl_config_from_toml(const char *text, struct StlConfig **out);

// Loads a config file; relative paths resolve against its directory.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum StlStatus stl_config_load(const char *path, struct StlConfig **out);

// Restricts every recipe to one seed.
//
// # Safety
// `cfg` must come from this library and not be freed.
enum StlStatus stl_config_set_seed(struct StlConfig *cfg, uint64_t seed);

// Sets the output directory.
//
// # Safety
// `cfg` must come from this library; `dir` must be NUL-terminated.
enum StlStatus stl_config_set_out(struct StlConfig *cfg, const char *dir);

// # Safety
// `cfg` must come from this library (or be null) and is invalid afterwards.
void stl_config_free(struct StlConfig *cfg);

// Runs the pipeline for every configured seed, writing the usual files to
// the output directory.
//
// # Safety
// `cfg` must come from this library and `out` be a valid pointer.
enum StlStatus stl_run(const struct StlConfig *cfg, bool per_node_eval, struct StlRun **out);

// Number of seeds in a run.
//
// # Safety
// `run` must come from `stl_run` or be null.
size_t stl_run_count(const struct StlRun *run);

// # Safety
// `run` must come from `stl_run` and `out` be a valid pointer.
enum StlStatus stl_run_summary(const struct StlRun *run, size_t index, struct StlRunSummary *out);

// Full report of one seed as JSON. Free the string with `stl_string_free`.
//
// # Safety
// `run` must come from `stl_run` and `out` be a valid pointer.
enum StlStatus stl_run_json(const struct StlRun *run, size_t index, char **out);

// # Safety
// `run` must come from `stl_run` (or be null) and is invalid afterwards.
void stl_run_free(struct StlRun *run);

// # Safety
// `s` must come from this library (or be null) and is invalid afterwards.
void stl_string_free(char *s);

// Intersection over union of two boxes.
//
// # Safety
// All pointers must be valid.
enum StlStatus stl_iou(const struct StlBox *a, const struct StlBox *b, double *out);

// All-points interpolated AP of `class_id` over `n_frames` frames. Sets
// `defined` to false (and `ap` to 0) when the class has no ground truth.
//
// # Safety
// `dets` and `gt` must point to `n_dets` and `n_gt` elements (or may be null
// when the count is 0); `ap` and `defined` must be valid.
enum StlStatus stl_average_precision(const struct StlDetection *dets,
                                     size_t n_dets,
                                     const struct StlGtBox *gt,
                                     size_t n_gt,
                                     uint32_t n_frames,
                                     uint32_t class_id,
                                     double iou_thresh,
                                     double *ap,
                                     bool *defined);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STLATTICE_H */
