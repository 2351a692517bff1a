#ifndef HOMOGEN_H
#define HOMOGEN_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum HomogenStatus {
  HOMOGEN_STATUS_OK = 0,
  HOMOGEN_STATUS_NULL_POINTER = 1,
  HOMOGEN_STATUS_INVALID_ARGUMENT = 2,
  HOMOGEN_STATUS_INVALID_UTF8 = 3,
  HOMOGEN_STATUS_EMPTY_PROVIDER_SET = 4,
  HOMOGEN_STATUS_DEGENERATE_PERFORMANCE = 5,
  HOMOGEN_STATUS_INVALID_LOAD = 6,
  HOMOGEN_STATUS_INVALID_OVERHEAD = 7,
  HOMOGEN_STATUS_PLAN_MISMATCH = 8,
  HOMOGEN_STATUS_DIMENSION_MISMATCH = 9,
  HOMOGEN_STATUS_INVALID_MATRIX = 10,
  HOMOGEN_STATUS_CONFIG_ERROR = 11,
  HOMOGEN_STATUS_OUT_OF_RANGE = 12,
  HOMOGEN_STATUS_PANIC = 13,
  HOMOGEN_STATUS_OTHER = 14,
} HomogenStatus;

// Providers and their performance values, keyed by id.
typedef struct HomogenPerformanceMap HomogenPerformanceMap;

// Integer allotments produced by one of the planners.
typedef struct HomogenPlan HomogenPlan;

// A simulator scenario.
typedef struct HomogenScenario HomogenScenario;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Description of the last error on this thread, or an empty string. The
// pointer stays valid until the next homogen call on the same thread.
const char *homogen_last_error(void);

// Library version as a static NUL-terminated string.
const char *homogen_version(void);

// Frees a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not be freed twice.
void homogen_string_free(char *s);

// Cluster performance in multiples of the standalone machine.
//
// # Safety
// `out` must be valid for writes.
enum HomogenStatus homogen_virtual_machine_count(double p_total, double p_standalone, double *out);

// Predicted distributed time `T/N_H + M·L`.
//
// # Safety
// `out` must be valid for writes.
enum HomogenStatus homogen_predicted_time(double standalone_time,
                                          double n_h,
                                          double overhead_slope,
                                          double load,
                                          double *out);

// Predicted speedup over the standalone machine.
//
// # Safety
// `out` must be valid for writes.
enum HomogenStatus homogen_predicted_speedup(double standalone_time,
                                             double n_h,
                                             double overhead_slope,
                                             double load,
                                             double *out);

// A new, empty performance map.
struct HomogenPerformanceMap *homogen_perf_map_new(void);

// Inserts or replaces one provider's performance. Values are checked when
// a plan is computed.
//
// # Safety
// `map` must be a live handle and `id` a NUL-terminated string.
enum HomogenStatus homogen_perf_map_set(struct HomogenPerformanceMap *map,
                                        const char *id,
                                        double performance);

// Number of providers in the map; 0 for null.
//
// # Safety
// `map` must be null or a live handle.
size_t homogen_perf_map_len(const struct HomogenPerformanceMap *map);

// # Safety
// `map` must be null or a live handle, not used afterwards.
void homogen_perf_map_free(struct HomogenPerformanceMap *map);

// Splits `load` units in proportion to the map's performances.
//
// # Safety
// `map` must be a live handle and `out` valid for writes.
enum HomogenStatus homogen_compute_scope_lengths(const struct HomogenPerformanceMap *map,
                                                 uint64_t load,
                                                 struct HomogenPlan **out);

// Splits `load` units evenly over the map's providers in id order,
// ignoring performance.
//
// # Safety
// `map` must be a live handle and `out` valid for writes.
enum HomogenStatus homogen_equal_scope_lengths(const struct HomogenPerformanceMap *map,
                                               uint64_t load,
                                               struct HomogenPlan **out);

// Number of providers in the plan; 0 for null.
//
// # Safety
// `plan` must be null or a live handle.
size_t homogen_plan_len(const struct HomogenPlan *plan);

// The load the plan splits; 0 for null.
//
// # Safety
// `plan` must be null or a live handle.
uint64_t homogen_plan_total_load(const struct HomogenPlan *plan);

// Provider id and allotment at `index`. The id pointer is owned by the
// plan and lives as long as it.
//
// # Safety
// `plan` must be a live handle; `id` and `allotment` valid for writes.
enum HomogenStatus homogen_plan_entry(const struct HomogenPlan *plan,
                                      size_t index,
                                      const char **id,
                                      uint64_t *allotment);

// # Safety
// `plan` must be null or a live handle, not used afterwards.
void homogen_plan_free(struct HomogenPlan *plan);

// The bundled nine-provider scenario.
struct HomogenScenario *homogen_scenario_replication(void);

// Parses a `key = value` scenario text.
//
// # Safety
// `text` must be a NUL-terminated string and `out` valid for writes.
enum HomogenStatus homogen_scenario_parse(const char *text, struct HomogenScenario **out);

// Replaces the scenario's jitter seed.
//
// # Safety
// `scenario` must be a live handle.
enum HomogenStatus homogen_scenario_set_seed(struct HomogenScenario *scenario, uint64_t seed);

// Runs the full sweep and returns it as CSV text with a header row.
// Free the result with [`homogen_string_free`].
//
// # Safety
// `scenario` must be a live handle and `out` valid for writes.
enum HomogenStatus homogen_scenario_sweep_csv(const struct HomogenScenario *scenario, char **out);

// # Safety
// `scenario` must be null or a live handle, not used afterwards.
void homogen_scenario_free(struct HomogenScenario *scenario);

// `out = a · b` for row-major `a` (`rows x inner`) and `b` (`inner x cols`).
// `out` must hold `rows * cols` values.
//
// # Safety
// The three buffers must be valid for the stated sizes.
enum HomogenStatus homogen_multiply_reference(const double *a,
                                              size_t rows,
                                              size_t inner,
                                              const double *b,
                                              size_t cols,
                                              double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HOMOGEN_H */
