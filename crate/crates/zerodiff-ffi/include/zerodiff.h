#ifndef ZERODIFF_H
#define ZERODIFF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum ZdStatus {
  ZdOk = 0,
  ZdConfigError = 1,
  ZdRuntimeError = 2,
  ZdIoError = 3,
  ZdNullPointer = 4,
} ZdStatus;

/**
 * Opaque experiment configuration handle.
 */
typedef struct ZdConfig ZdConfig;

/**
 * Opaque diffusion schedule handle.
 */
typedef struct ZdSchedule ZdSchedule;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent error on this thread; empty string if
 * none. The pointer stays valid until the next failing call on the thread.
 */
const char *zd_last_error_message(void);

/**
 * Build the VP discretization with `t_max` steps.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum ZdStatus zd_schedule_new(uint32_t t_max,
                              double beta_min,
                              double beta_max,
                              struct ZdSchedule **out);

/**
 * # Safety
 * `schedule` must come from `zd_schedule_new` and not be freed twice.
 */
void zd_schedule_free(struct ZdSchedule *schedule);

/**
 * Cumulative alpha_bar_t for t in 0..=t_max.
 *
 * # Safety
 * `schedule` and `out` must be valid pointers.
 */
enum ZdStatus zd_schedule_alpha_bar(const struct ZdSchedule *schedule, uint32_t t, double *out);

/**
 * Default experiment configuration.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum ZdStatus zd_config_default(struct ZdConfig **out);

/**
 * Parse a JSON experiment configuration (missing fields take defaults).
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` a valid pointer.
 */
enum ZdStatus zd_config_from_json(const char *json, struct ZdConfig **out);

/**
 * # Safety
 * `config` must come from a `zd_config_*` constructor, freed once.
 */
void zd_config_free(struct ZdConfig *config);

/**
 * Run the full pipeline, writing artifacts under `out_dir`. On success
 * `metrics_json` receives the metrics report as an owned JSON string.
 *
 * # Safety
 * All pointers must be valid; `out_dir` NUL-terminated.
 */
enum ZdStatus zd_run_experiment(const struct ZdConfig *config,
                                const char *out_dir,
                                char **metrics_json);

/**
 * Harmonic mean H = 2SU/(S+U); 0 when both are 0.
 */
double zd_harmonic_mean(double s, double u);

/**
 * Release a string returned by this library.
 *
 * # Safety
 * `s` must come from this library and be freed exactly once.
 */
void zd_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ZERODIFF_H */
