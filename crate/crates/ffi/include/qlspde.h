#ifndef QLSPDE_H
#define QLSPDE_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/*
 Result codes.
 */
typedef enum QlStatus {
  QL_STATUS_OK = 0,
  QL_STATUS_NULL_POINTER = 1,
  QL_STATUS_INVALID_ARGUMENT = 2,
  /*
   The configuration was rejected; the message names the clause.
   */
  QL_STATUS_CONFIG_ERROR = 3,
  /*
   Non-contraction, positivity violation, iteration limit, ...
   */
  QL_STATUS_NUMERICAL_FAILURE = 4,
  /*
   The run completed but at least one of its assertions failed.
   */
  QL_STATUS_ASSERTION_FAILED = 5,
  QL_STATUS_IO = 6,
  QL_STATUS_PANIC = 7,
} QlStatus;

/*
 Validated experiment configuration.
 */
typedef struct QlConfig QlConfig;

/*
 Solution `u(t, x)` of the quasi-linear equation.
 */
typedef struct QlField QlField;

/*
 Monte-Carlo comparison at one point.
 */
typedef struct QlFkResult {
  double u_value;
  double mc_mean;
  double mc_stderr;
  double z_score;
  double bias_budget;
  bool pass;
} QlFkResult;

/*
 Minimized action for a point endpoint.
 */
typedef struct QlActionResult {
  double value;
  double endpoint_gap;
  bool converged;
} QlActionResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or null after a success.
 The pointer stays valid until the next call into this library on the same thread.
 */
const char *ql_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *ql_version(void);

/*
 Default configuration (two-mode reference preset).

 # Safety
 `out` must be a valid pointer to writable storage for one handle.
 */
enum QlStatus ql_config_default(struct QlConfig **out);

/*
 Parses and validates a TOML configuration. `seed` overrides the master
 seed when `override_seed` is true.

 # Safety
 `toml` must be a NUL-terminated string; `out` must be writable.
 */
enum QlStatus ql_config_from_toml(const char *toml,
                                  bool override_seed,
                                  uint64_t seed,
                                  struct QlConfig **out);

/*
 Number of modes of the configured model.

 # Safety
 `config` must come from this library; `out` must be writable.
 */
enum QlStatus ql_config_n_modes(const struct QlConfig *config, uintptr_t *out);

/*
 # Safety
 `config` must come from this library and not be used afterwards. Null is ignored.
 */
void ql_config_free(struct QlConfig *config);

/*
 Runs a subcommand (e.g. `"solve-qlpde"`) and writes its artifacts into `out_dir`.
 Returns `AssertionFailed` when the run finished but an assertion failed.

 # Safety
 `config` must come from this library; strings must be NUL-terminated.
 */
enum QlStatus ql_run(const struct QlConfig *config, const char *command, const char *out_dir);

/*
 Solves the quasi-linear equation with the configured solver parameters.

 # Safety
 `config` must come from this library; `out` must be writable.
 */
enum QlStatus ql_solve(const struct QlConfig *config, struct QlField **out);

/*
 `u(t, x)` with `x` of length `n`.

 # Safety
 `field` must come from this library; `x` must hold `n` doubles; `out` must be writable.
 */
enum QlStatus ql_field_value(const struct QlField *field,
                             double t,
                             const double *x,
                             uintptr_t n,
                             double *out);

/*
 # Safety
 `field` must come from this library and not be used afterwards. Null is ignored.
 */
void ql_field_free(struct QlField *field);

/*
 Compares `u(t, x)` with the Monte-Carlo mean of `g(X(t))` using the
 configured simulation settings.

 # Safety
 Handles must come from this library; `x` must hold `n` doubles; `out` must be writable.
 */
enum QlStatus ql_feynman_kac(const struct QlConfig *config,
                             const struct QlField *field,
                             const double *x,
                             uintptr_t n,
                             double t,
                             struct QlFkResult *out);

/*
 Minimal action `(1/2) int |phi|^2` over controls steering `x` to `target` at time `t`.

 # Safety
 `config` must come from this library; `x` and `target` must hold `n` doubles.
 */
enum QlStatus ql_minimize_action(const struct QlConfig *config,
                                 const double *x,
                                 const double *target,
                                 uintptr_t n,
                                 double t,
                                 struct QlActionResult *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QLSPDE_H */
