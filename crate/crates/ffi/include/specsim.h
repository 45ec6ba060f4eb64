#ifndef SPECSIM_H
#define SPECSIM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>


// Result code of every fallible call.
typedef enum SpecsimStatus {
  SPECSIM_STATUS_OK = 0,
  SPECSIM_STATUS_NULL_POINTER = 1,
  SPECSIM_STATUS_INVALID_UTF8 = 2,
  // Unknown key, unparsable value or invalid configuration.
  SPECSIM_STATUS_INVALID_CONFIG = 3,
  // Arguments outside a formula's domain, such as L <= 1 for r*.
  SPECSIM_STATUS_DOMAIN = 4,
  // The simulation aborted (protocol violation or livelock).
  SPECSIM_STATUS_SIMULATION = 5,
  SPECSIM_STATUS_IO = 6,
  SPECSIM_STATUS_PANIC = 7,
} SpecsimStatus;

typedef enum SpecsimMode {
  SPECSIM_MODE_ORDINARY = 0,
  SPECSIM_MODE_PARALLEL = 1,
} SpecsimMode;

typedef enum SpecsimVariant {
  SPECSIM_VARIANT_AR = 0,
  SPECSIM_VARIANT_ORDINARY = 1,
  SPECSIM_VARIANT_PARALLEL = 2,
  SPECSIM_VARIANT_HYBRID = 3,
} SpecsimVariant;

// Opaque configuration handle.
typedef struct SpecsimConfig SpecsimConfig;

// Opaque report handle.
typedef struct SpecsimReport SpecsimReport;

// Inputs of the throughput model. Latencies are in seconds.
typedef struct SpecsimModelParams {
  size_t batch;
  double accept_len;
  size_t gamma;
  double t_target;
  double t_draft;
  // Fallback ratio; only read by the parallel formula.
  double rollback_ratio;
} SpecsimModelParams;

// Scalar summary of a report.
typedef struct SpecsimReportSummary {
  uint64_t seed;
  double target_throughput;
  double draft_throughput;
  double mean_accepted_length;
  double mean_rollback_ratio;
  double parallel_fraction;
  double sim_duration;
  uint64_t rounds;
  uint64_t total_committed;
  uint64_t requests_finished;
  uint64_t breaker_activations;
} SpecsimReportSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or an empty string.
// Valid until the next failing call on the same thread.
const char *specsim_last_error(void);

// Library version as a static string.
const char *specsim_version(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not be freed twice.
void specsim_string_free(char *s);

// New config with default values.
struct SpecsimConfig *specsim_config_new(void);

// Loads a `key = value` config file into a new handle.
//
// # Safety
// `path` must be a nul-terminated string; `out` must be writable.
enum SpecsimStatus specsim_config_load(const char *path, struct SpecsimConfig **out);

// # Safety
// `cfg` must come from this library and not be freed twice.
void specsim_config_free(struct SpecsimConfig *cfg);

// Sets one config key from its text form.
//
// # Safety
// `cfg` must be a live handle; `key` and `value` nul-terminated strings.
enum SpecsimStatus specsim_config_set(struct SpecsimConfig *cfg,
                                      const char *key,
                                      const char *value);

// Writes the text form of one config key to `*out`.
//
// # Safety
// `cfg` must be a live handle; `key` a nul-terminated string; `out` writable.
enum SpecsimStatus specsim_config_get(const struct SpecsimConfig *cfg, const char *key, char **out);

// Checks every config invariant; the error lists all violations.
//
// # Safety
// `cfg` must be a live handle.
enum SpecsimStatus specsim_config_validate(const struct SpecsimConfig *cfg);

// # Safety
// `params` must point to a valid struct; `out` must be writable.
enum SpecsimStatus specsim_ordinary_throughput(const struct SpecsimModelParams *params,
                                               double *out);

// # Safety
// `params` must point to a valid struct; `out` must be writable.
enum SpecsimStatus specsim_parallel_throughput(const struct SpecsimModelParams *params,
                                               double *out);

// Critical rollback ratio r*. Fails with `Domain` when L <= 1.
//
// # Safety
// `params` must point to a valid struct; `out` must be writable.
enum SpecsimStatus specsim_critical_ratio(const struct SpecsimModelParams *params, double *out);

// PARALLEL when `rollback_ratio <= r_star`.
enum SpecsimMode specsim_preferred_mode(double rollback_ratio, double r_star);

// Runs one simulation of the configured workload.
//
// # Safety
// `cfg` must be a live handle; `out` must be writable.
enum SpecsimStatus specsim_run(const struct SpecsimConfig *cfg,
                               enum SpecsimVariant variant,
                               struct SpecsimReport **out);

// # Safety
// `report` must be a live handle; `out` must be writable.
enum SpecsimStatus specsim_report_summary(const struct SpecsimReport *report,
                                          struct SpecsimReportSummary *out);

// Full report as JSON (`as_csv == false`) or as a CSV header and row.
//
// # Safety
// `report` must be a live handle; `out` must be writable.
enum SpecsimStatus specsim_report_export(const struct SpecsimReport *report,
                                         bool as_csv,
                                         char **out);

// # Safety
// `report` must come from this library and not be freed twice.
void specsim_report_free(struct SpecsimReport *report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPECSIM_H */
