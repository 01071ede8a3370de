/* C interface to the feedback-gated ReLU engine. */

#ifndef FGRELU_H
#define FGRELU_H

/* Generated by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible call.
 */
typedef enum FgStatus {
  FG_STATUS_OK = 0,
  FG_STATUS_NULL_POINTER = 1,
  FG_STATUS_INVALID_ARGUMENT = 2,
  FG_STATUS_DIMENSION = 3,
  FG_STATUS_IO = 4,
  FG_STATUS_FORMAT = 5,
  FG_STATUS_INTERNAL = 6,
} FgStatus;

/**
 * Opaque network handle.
 */
typedef struct FgNetwork FgNetwork;

/**
 * Opaque activation-parameter handle.
 */
typedef struct FgParams FgParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static null-terminated string.
 */
const char *fg_version(void);

/**
 * Message of the last error on this thread; empty when no error occurred.
 * Valid until the next failing call on the same thread.
 */
const char *fg_last_error_message(void);

/**
 * Create activation parameters; requires `0 < beta_max < 1` and `eta > 0`.
 *
 * # Safety
 * `out` must point to writable memory for one pointer.
 */
enum FgStatus fg_params_new(double beta_max, double eta, struct FgParams **out);

/**
 * Enable the learned-threshold variant with coefficient `alpha`.
 *
 * # Safety
 * `params` must be a live handle from [`fg_params_new`].
 */
enum FgStatus fg_params_set_alpha(struct FgParams *params, double alpha);

/**
 * Release a parameter handle. Null is a no-op.
 *
 * # Safety
 * `params` must come from [`fg_params_new`] and not already be freed.
 */
void fg_params_free(struct FgParams *params);

/**
 * Saturating feedback function β(μ_D).
 *
 * # Safety
 * `params` must be a live handle.
 */
double fg_beta(const struct FgParams *params, double mu_d);

/**
 * Gain 1/(1 − β(μ_D)).
 *
 * # Safety
 * `params` must be a live handle.
 */
double fg_gain(const struct FgParams *params, double mu_d);

/**
 * The gated activation max(0, μ_S)/(1 − β(μ_D)).
 *
 * # Safety
 * `params` must be a live handle.
 */
double fg_relu(const struct FgParams *params, double mu_s, double mu_d);

/**
 * Threshold variant max(0, μ_S + α·μ_D)/(1 − β(μ_D)); the handle must have
 * alpha set.
 *
 * # Safety
 * `params` must be a live handle; `out` must be writable.
 */
enum FgStatus fg_relu_threshold(const struct FgParams *params,
                                double mu_s,
                                double mu_d,
                                double *out);

/**
 * Build one of the named preset networks with seeded initialization.
 *
 * # Safety
 * `name` must be a null-terminated string; `out` must be writable.
 */
enum FgStatus fg_network_new_preset(const char *name, uint64_t seed, struct FgNetwork **out);

/**
 * Release a network handle. Null is a no-op.
 *
 * # Safety
 * `net` must come from this library and not already be freed.
 */
void fg_network_free(struct FgNetwork *net);

/**
 * Trainable parameter count.
 *
 * # Safety
 * `net` must be a live handle; `out` must be writable.
 */
enum FgStatus fg_network_param_count(const struct FgNetwork *net, uint64_t *out);

/**
 * Flat input length of one sample.
 *
 * # Safety
 * `net` must be a live handle; `out` must be writable.
 */
enum FgStatus fg_network_input_len(const struct FgNetwork *net, uint64_t *out);

/**
 * Flat output length of one sample (the final layer's element count).
 *
 * # Safety
 * `net` must be a live handle; `out` must be writable.
 */
enum FgStatus fg_network_output_len(const struct FgNetwork *net, uint64_t *out);

/**
 * Run one sample through the unrolled network (evaluation mode, all
 * timesteps) and write the final pass's output.
 *
 * # Safety
 * `input` must point to `input_len` readable doubles and `output` to
 * `output_len` writable doubles, with lengths matching
 * [`fg_network_input_len`] / [`fg_network_output_len`].
 */
enum FgStatus fg_network_forward(const struct FgNetwork *net,
                                 const double *input,
                                 uint64_t input_len,
                                 double *output,
                                 uint64_t output_len);

/**
 * Save the network to a checkpoint file.
 *
 * # Safety
 * `net` must be a live handle; `path` a null-terminated string.
 */
enum FgStatus fg_network_save(const struct FgNetwork *net, const char *path);

/**
 * Load a network from a checkpoint file.
 *
 * # Safety
 * `path` must be a null-terminated string; `out` must be writable.
 */
enum FgStatus fg_network_load(const char *path, struct FgNetwork **out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* FGRELU_H */
