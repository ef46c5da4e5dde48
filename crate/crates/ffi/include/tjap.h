#ifndef TJAP_H
#define TJAP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every entry point.
 */
typedef enum TjapStatus {
  TJAP_STATUS_OK = 0,
  TJAP_STATUS_NULL_POINTER = 1,
  TJAP_STATUS_INVALID_ARGUMENT = 2,
  TJAP_STATUS_CONVERGENCE = 3,
  TJAP_STATUS_SEQUENCING = 4,
  TJAP_STATUS_REFUSED = 5,
  TJAP_STATUS_GENERATION = 6,
  TJAP_STATUS_CONFIG = 7,
  TJAP_STATUS_IO = 8,
  TJAP_STATUS_VERIFICATION = 9,
  TJAP_STATUS_BUFFER_TOO_SMALL = 10,
  TJAP_STATUS_PANIC = 11,
} TjapStatus;

/**
 * A learning policy bound to the scenario it was built for.
 */
typedef struct TjapPolicy TjapPolicy;

/**
 * A generated market instance.
 */
typedef struct TjapScenario TjapScenario;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *tjap_version(void);

/**
 * Bytes needed for the last error message including its terminator, or 0
 * when the last call on this thread succeeded.
 */
size_t tjap_last_error_length(void);

/**
 * Copies the last error message of this thread into `buf`.
 *
 * # Safety
 * `buf` must be valid for `len` writes.
 */
enum TjapStatus tjap_last_error_message(char *buf, size_t len);

/**
 * Generates a scenario from a JSON scenario config (null for defaults).
 *
 * # Safety
 * `config_json` must be null or a NUL-terminated string; `out` must be a
 * valid pointer.
 */
enum TjapStatus tjap_scenario_new(const char *config_json,
                                  uint64_t seed,
                                  struct TjapScenario **out);

/**
 * Releases a scenario; null is ignored.
 *
 * # Safety
 * `scenario` must come from `tjap_scenario_new` and not be used afterwards.
 */
void tjap_scenario_free(struct TjapScenario *scenario);

/**
 * Price cap of the scenario.
 *
 * # Safety
 * Both pointers must be valid.
 */
enum TjapStatus tjap_scenario_price_cap(const struct TjapScenario *scenario, double *out);

/**
 * Feature dimension, catalog size, capacity and number of source markets.
 *
 * # Safety
 * `scenario` must be valid; each output may be null to skip it.
 */
enum TjapStatus tjap_scenario_dimensions(const struct TjapScenario *scenario,
                                         size_t *d,
                                         size_t *n_items,
                                         size_t *capacity,
                                         size_t *sources);

/**
 * Builds a registered algorithm (`tjap`, `pool`, `target_only`,
 * `topk_pricing`, `clairvoyant`) for `scenario`. `settings_json` holds
 * policy settings; null means defaults.
 *
 * # Safety
 * `scenario` and `out` must be valid; strings must be NUL-terminated.
 */
enum TjapStatus tjap_policy_new(const struct TjapScenario *scenario,
                                const char *algorithm,
                                const char *settings_json,
                                uint64_t seed,
                                struct TjapPolicy **out);

/**
 * Releases a policy; null is ignored.
 *
 * # Safety
 * `policy` must come from `tjap_policy_new` and not be used afterwards.
 */
void tjap_policy_free(struct TjapPolicy *policy);

/**
 * Simulates `horizon` rounds and writes the cumulative regret of every
 * round to `cum_regret`. `forced`, if not null, receives one 0/1 flag per
 * round. A policy can be run once.
 *
 * # Safety
 * Handles must be valid; output arrays must hold `horizon` elements.
 */
enum TjapStatus tjap_run(const struct TjapScenario *scenario,
                         struct TjapPolicy *policy,
                         size_t horizon,
                         double *cum_regret,
                         uint8_t *forced);

/**
 * Optimal assortment and prices for linear utilities
 * `intercepts[i] - slopes[i] * p` on a grid over `[0, p_max]`.
 * `items` and `prices` must hold `min(capacity, n)` entries; `len`
 * receives the number actually written.
 *
 * # Safety
 * Input arrays must hold `n` elements; output pointers must be valid.
 */
enum TjapStatus tjap_optimal_assortment(const double *intercepts,
                                        const double *slopes,
                                        size_t n,
                                        size_t capacity,
                                        double p_max,
                                        size_t grid_points,
                                        size_t *items,
                                        double *prices,
                                        size_t *len,
                                        double *value);

/**
 * Choice probabilities with the outside option first; `out` holds `n + 1`
 * entries.
 *
 * # Safety
 * `utilities` must hold `n` elements and `out` `n + 1`.
 */
enum TjapStatus tjap_choice_probabilities(const double *utilities, size_t n, double *out);

/**
 * Upper bound on optimal prices given the largest zero-price utility, the
 * capacity and the sensitivity floor.
 *
 * # Safety
 * `out` must be valid.
 */
enum TjapStatus tjap_price_cap(double max_utility, size_t capacity, double l0, double *out);

/**
 * Runs an experiment config (JSON text) into `out_dir` on `threads`
 * workers. `failed_cells`, if not null, receives the number of failed
 * cells; the call still returns `TJAP_STATUS_OK` when some cells failed.
 *
 * # Safety
 * Strings must be NUL-terminated; `failed_cells` may be null.
 */
enum TjapStatus tjap_run_experiment(const char *config_json,
                                    const char *out_dir,
                                    size_t threads,
                                    size_t *failed_cells);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TJAP_H */
