#ifndef JARZMLE_H
#define JARZMLE_H

#include <stddef.h>
#include <stdint.h>

typedef enum JarzmleStatus {
  JARZMLE_STATUS_OK = 0,
  JARZMLE_STATUS_NULL_POINTER = 1,
  JARZMLE_STATUS_INVALID_ARGUMENT = 2,
  JARZMLE_STATUS_PARTICLE_DIVERGED = 3,
  JARZMLE_STATUS_WEIGHT_DEGENERACY = 4,
  JARZMLE_STATUS_NUMERICAL = 5,
  JARZMLE_STATUS_BUFFER_TOO_SMALL = 6,
  JARZMLE_STATUS_PANIC = 7,
} JarzmleStatus;

typedef enum JarzmleOptimizer {
  JARZMLE_OPTIMIZER_SGD = 0,
  JARZMLE_OPTIMIZER_ADAM = 1,
} JarzmleOptimizer;

// Opaque result of a fit.
typedef struct JarzmleFit JarzmleFit;

// Opaque model handle.
typedef struct JarzmleModel JarzmleModel;

// Settings of a JALA-EM run. `theta_init` points to `theta_len` values.
typedef struct JarzmleRunConfig {
  uintptr_t n_particles;
  uintptr_t n_iterations;
  double langevin_step;
  enum JarzmleOptimizer optimizer;
  double gamma;
  // Resample when ESS/N falls below this fraction; 0 disables resampling.
  double ess_threshold_fraction;
  uint64_t seed;
  const double *theta_init;
  uintptr_t theta_len;
} JarzmleRunConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the calling thread's most recent failure; empty after success.
// Valid until the next call into this library on the same thread.
const char *jarzmle_last_error(void);

// NUL-terminated crate version.
const char *jarzmle_version(void);

// Latent `x ~ N(θ, 1)`, observation `y ~ N(x, 1)`.
//
// # Safety
// `out` must be a valid pointer to a handle slot.
enum JarzmleStatus jarzmle_model_conjugate_new(double y, struct JarzmleModel **out);

// Bayesian linear regression with `θ = (log σ², log α)`. `x` is `rows × cols`.
//
// # Safety
// `x` must hold `rows * cols` values, `y` `rows` values, `out` a handle slot.
enum JarzmleStatus jarzmle_model_linreg_new(const double *x,
                                            uintptr_t rows,
                                            uintptr_t cols,
                                            const double *y,
                                            struct JarzmleModel **out);

// Bayesian logistic regression with prior `N(θ·1, σ0² I)`. Labels are 0 or 1.
//
// # Safety
// `x` must hold `rows * cols` values, `labels` `rows` values, `out` a handle slot.
enum JarzmleStatus jarzmle_model_logistic_new(const double *x,
                                              uintptr_t rows,
                                              uintptr_t cols,
                                              const double *labels,
                                              double prior_variance,
                                              struct JarzmleModel **out);

// # Safety
// `model` must come from a `jarzmle_model_*_new` call and not be used afterwards.
void jarzmle_model_free(struct JarzmleModel *model);

// Latent and parameter dimensions of a model.
//
// # Safety
// `model` must be a live handle; the out pointers must be valid.
enum JarzmleStatus jarzmle_model_dims(const struct JarzmleModel *model,
                                      uintptr_t *dim_x,
                                      uintptr_t *dim_theta);

// Runs JALA-EM. `log_z0` is the log-evidence at the initial parameter (0 if unknown).
//
// # Safety
// `model` must be a live handle, `config` valid, `config.theta_init` valid for
// `config.theta_len` reads, and `out` a handle slot.
enum JarzmleStatus jarzmle_fit_jala_em(const struct JarzmleModel *model,
                                       const struct JarzmleRunConfig *config,
                                       double log_z0,
                                       struct JarzmleFit **out);

// # Safety
// `fit` must come from `jarzmle_fit_jala_em` and not be used afterwards.
void jarzmle_fit_free(struct JarzmleFit *fit);

// Scalar summaries of a fit. Any out pointer may be null.
//
// # Safety
// `fit` must be a live handle; non-null out pointers must be valid.
enum JarzmleStatus jarzmle_fit_summary(const struct JarzmleFit *fit,
                                       double *log_evidence,
                                       uintptr_t *iterations_run,
                                       uintptr_t *n_particles,
                                       uintptr_t *resample_count);

// Copies the final parameter into `out` (capacity `len`).
//
// # Safety
// `fit` must be a live handle and `out` valid for `len` writes.
enum JarzmleStatus jarzmle_fit_theta(const struct JarzmleFit *fit, double *out, uintptr_t len);

// Copies the normalized final weights into `out` (capacity `len`).
//
// # Safety
// `fit` must be a live handle and `out` valid for `len` writes.
enum JarzmleStatus jarzmle_fit_weights(const struct JarzmleFit *fit, double *out, uintptr_t len);

// Copies the final particle positions (row-major `N × dim_x`) into `out`.
//
// # Safety
// `fit` must be a live handle and `out` valid for `len` writes.
enum JarzmleStatus jarzmle_fit_positions(const struct JarzmleFit *fit, double *out, uintptr_t len);

// Copies the parameter trajectory (row-major `(K+1) × dim_theta`) into `out`.
//
// # Safety
// `fit` must be a live handle and `out` valid for `len` writes.
enum JarzmleStatus jarzmle_fit_theta_trajectory(const struct JarzmleFit *fit,
                                                double *out,
                                                uintptr_t len);

// `log((1/n) Σ exp(values_i))`, stable for large magnitudes.
//
// # Safety
// `values` must hold `n` values and `out` be valid.
enum JarzmleStatus jarzmle_log_mean_exp(const double *values, uintptr_t n, double *out);

// Softmax of log-weights into `out` (length `n`).
//
// # Safety
// `log_weights` must hold `n` values and `out` be valid for `n` writes.
enum JarzmleStatus jarzmle_normalized_weights(const double *log_weights, uintptr_t n, double *out);

// Effective sample size `1 / Σ w_i²` of normalized weights.
//
// # Safety
// `weights` must hold `n` values and `out` be valid.
enum JarzmleStatus jarzmle_ess(const double *weights, uintptr_t n, double *out);

// Systematic resampling with offset `u ∈ [0, 1)`; writes `n` ancestor indices.
//
// # Safety
// `weights` must hold `n` values and `ancestors` be valid for `n` writes.
enum JarzmleStatus jarzmle_systematic_resample(const double *weights,
                                               uintptr_t n,
                                               double u,
                                               uintptr_t *ancestors);

// Closed-form log marginal likelihood of Bayesian linear regression with
// noise variance `sigma_sq` and prior precision `alpha`.
//
// # Safety
// `x` must hold `rows * cols` values, `y` `rows` values, `out` be valid.
enum JarzmleStatus jarzmle_gaussian_evidence(const double *x,
                                             uintptr_t rows,
                                             uintptr_t cols,
                                             const double *y,
                                             double sigma_sq,
                                             double alpha,
                                             double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* JARZMLE_H */
