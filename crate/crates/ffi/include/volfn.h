#ifndef VOLFN_H
#define VOLFN_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

#define VOLFN_OK 0

/**
 * Null pointer or malformed argument.
 */
#define VOLFN_ERR_ARGUMENT 1

/**
 * Configuration, tuning or shape problem.
 */
#define VOLFN_ERR_CONFIG 2

/**
 * Bad or insufficient data.
 */
#define VOLFN_ERR_DATA 3

/**
 * Domain, degeneracy or numerical failure.
 */
#define VOLFN_ERR_NUMERIC 4

/**
 * A Rust panic was caught at the boundary.
 */
#define VOLFN_ERR_PANIC 5

#define VOLFN_TRUNC_OFF 0

#define VOLFN_TRUNC_GLOBAL_NORM 1

#define VOLFN_TRUNC_ELEMENTWISE 2

/**
 * Opaque estimator configuration.
 */
typedef struct VolfnConfig VolfnConfig;

/**
 * Opaque n×d log-price panel.
 */
typedef struct VolfnGrid VolfnGrid;

typedef struct {
  double phi0_at_0;
  double phi1_at_0;
  double phi00;
  double phi01;
  double phi11;
  double psi00;
  double psi01;
  double psi11;
} VolfnKernelConstants;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread; do not free.
 */
const char *volfn_last_error(void);

/**
 * Release a string returned by this library.
 */
void volfn_string_free(char *s);

/**
 * Build a grid from `n_rows` × `d` row-major log-prices.
 */
int32_t volfn_grid_new(const double *data,
                       uintptr_t n_rows,
                       uintptr_t d,
                       double delta_n,
                       VolfnGrid **out);

void volfn_grid_free(VolfnGrid *g);

/**
 * Rate-optimal (hat) estimator with the given tuning constants.
 */
int32_t volfn_config_new_hat(double theta,
                             double varrho,
                             double kappa,
                             double rho,
                             VolfnConfig **out);

/**
 * Positive semidefinite (tilde) estimator with the given tuning constants.
 */
int32_t volfn_config_new_psd(double theta,
                             double varrho,
                             double kappa,
                             double rho,
                             double delta,
                             VolfnConfig **out);

/**
 * Set the jump-truncation rule. `mode` is one of the VOLFN_TRUNC_* values.
 */
int32_t volfn_config_set_truncation(VolfnConfig *cfg, int32_t mode, double alpha_mult, double rho);

int32_t volfn_config_set_ci_level(VolfnConfig *cfg, double level);

void volfn_config_free(VolfnConfig *cfg);

/**
 * Estimate a functional and return the full result as a JSON string in
 * `out_json` (free with `volfn_string_free`). `params_json` may be null.
 */
int32_t volfn_estimate_json(const VolfnGrid *grid,
                            const VolfnConfig *cfg,
                            const char *name,
                            const char *params_json,
                            char **out_json);

/**
 * Estimate a scalar-valued functional; writes the bias-corrected value and
 * its standard error.
 */
int32_t volfn_estimate_scalar(const VolfnGrid *grid,
                              const VolfnConfig *cfg,
                              const char *name,
                              const char *params_json,
                              double *value,
                              double *std_error);

/**
 * Constants of the built-in kernel `name` ("minmax", ...).
 */
int32_t volfn_kernel_constants(const char *name, VolfnKernelConstants *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VOLFN_H */
