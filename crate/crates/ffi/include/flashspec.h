#ifndef FLASHSPEC_H
#define FLASHSPEC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FsStatus {
  FS_STATUS_OK = 0,
  FS_STATUS_NULL_POINTER = 1,
  FS_STATUS_INVALID_UTF8 = 2,
  FS_STATUS_CONFIG = 3,
  FS_STATUS_CONTRACT = 4,
  FS_STATUS_STRUCTURE = 5,
  FS_STATUS_DIVERGENCE = 6,
  FS_STATUS_IO = 7,
  FS_STATUS_SERIALIZATION = 8,
  FS_STATUS_OUT_OF_RANGE = 9,
  FS_STATUS_PANIC = 10,
} FsStatus;

// A finished experiment with its report and per-trial outputs.
typedef struct FsExperiment FsExperiment;

// A hardware description, built from a preset or JSON.
typedef struct FsHardware FsHardware;

// A latency profile seeded from a hardware description.
typedef struct FsProfile FsProfile;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *fs_version(void);

// Message of the last failed call on this thread, or NULL. The pointer stays
// valid until the next call into the library on the same thread.
const char *fs_last_error(void);

// Releases a string returned by this library. NULL is ignored.
//
// # Safety
// `s` must come from this library and not be freed twice.
void fs_string_free(char *s);

// Looks up a named hardware preset.
//
// # Safety
// `name` must be a NUL-terminated string; `out` must be writable.
enum FsStatus fs_hardware_preset(const char *name, struct FsHardware **out);

// Parses a hardware description from JSON.
//
// # Safety
// `json` must be a NUL-terminated string; `out` must be writable.
enum FsStatus fs_hardware_from_json(const char *json, struct FsHardware **out);

// Serializes a hardware description to JSON.
//
// # Safety
// `hw` must be a live handle; `out` must be writable.
enum FsStatus fs_hardware_to_json(const struct FsHardware *hw, char **out);

// Latency of one autoregressive step in ms.
//
// # Safety
// `hw` must be a live handle; `out` must be writable.
enum FsStatus fs_hardware_ar_step_ms(const struct FsHardware *hw, double *out);

// Latency of one verification pass over a tree of `rows` nodes and `leaves`
// leaves, in ms.
//
// # Safety
// `hw` must be a live handle; `out` must be writable.
enum FsStatus fs_hardware_verify_ms(const struct FsHardware *hw,
                                    size_t rows,
                                    size_t leaves,
                                    double *out);

// # Safety
// `hw` must come from this library and not be freed twice. NULL is ignored.
void fs_hardware_free(struct FsHardware *hw);

// Seeds a latency profile with every shape up to `max_rows` rows.
// A `penalty` of 0 selects the default.
//
// # Safety
// `hw` must be a live handle; `out` must be writable.
enum FsStatus fs_profile_seed(const struct FsHardware *hw,
                              size_t max_rows,
                              double penalty,
                              struct FsProfile **out);

// Estimated latency for a tree shape, in ms.
//
// # Safety
// `profile` must be a live handle; `out` must be writable.
enum FsStatus fs_profile_estimate(const struct FsProfile *profile,
                                  size_t rows,
                                  size_t leaves,
                                  double *out);

// Serializes the profile's measured triples to JSON.
//
// # Safety
// `profile` must be a live handle; `out` must be writable.
enum FsStatus fs_profile_to_json(const struct FsProfile *profile, char **out);

// # Safety
// `profile` must come from this library and not be freed twice. NULL is ignored.
void fs_profile_free(struct FsProfile *profile);

// Runs an experiment from a JSON config. A previous report is also a valid
// config and reproduces that run.
//
// # Safety
// `config_json` must be a NUL-terminated string; `out` must be writable.
enum FsStatus fs_experiment_run(const char *config_json, struct FsExperiment **out);

// The full report as JSON.
//
// # Safety
// `exp` must be a live handle; `out` must be writable.
enum FsStatus fs_experiment_report_json(const struct FsExperiment *exp, char **out);

// One CSV row per trial.
//
// # Safety
// `exp` must be a live handle; `out` must be writable.
enum FsStatus fs_experiment_report_csv(const struct FsExperiment *exp, char **out);

// One CSV row per decoding cycle across all trials.
//
// # Safety
// `exp` must be a live handle; `out` must be writable.
enum FsStatus fs_experiment_trace_csv(const struct FsExperiment *exp, char **out);

// Geometric-mean simulated throughput over trials, in tokens per second.
//
// # Safety
// `exp` must be a live handle; `out` must be writable.
enum FsStatus fs_experiment_tokens_per_s(const struct FsExperiment *exp, double *out);

// Geometric-mean speedup over autoregressive decoding on the same device.
//
// # Safety
// `exp` must be a live handle; `out` must be writable.
enum FsStatus fs_experiment_speedup(const struct FsExperiment *exp, double *out);

// Mean accepted draft tokens per cycle.
//
// # Safety
// `exp` must be a live handle; `out` must be writable.
enum FsStatus fs_experiment_mean_accepted(const struct FsExperiment *exp, double *out);

// Number of trials in the experiment.
//
// # Safety
// `exp` must be a live handle; `out` must be writable.
enum FsStatus fs_experiment_trial_count(const struct FsExperiment *exp, size_t *out);

// Copies the generated tokens of `trial` into `buf`. `len` receives the
// token count; when `buf` is NULL or `cap` is too small nothing is copied and
// `len` still reports the required size.
//
// # Safety
// `exp` must be a live handle; `buf` must hold `cap` values or be NULL;
// `len` must be writable.
enum FsStatus fs_experiment_tokens(const struct FsExperiment *exp,
                                   size_t trial,
                                   uint32_t *buf,
                                   size_t cap,
                                   size_t *len);

// # Safety
// `exp` must come from this library and not be freed twice. NULL is ignored.
void fs_experiment_free(struct FsExperiment *exp);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FLASHSPEC_H */
