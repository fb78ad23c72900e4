#ifndef MEGAFUSION_H
#define MEGAFUSION_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MfStatus {
  MF_STATUS_OK = 0,
  MF_STATUS_NULL_POINTER = 1,
  MF_STATUS_INVALID_ARGUMENT = 2,
  MF_STATUS_NUMERIC = 3,
  MF_STATUS_IO = 4,
  MF_STATUS_PANIC = 5,
} MfStatus;

/**
 * Noise schedule handle.
 */
typedef struct MfSchedule MfSchedule;

/**
 * Image tensor handle, `channels x height x width`, row-major per channel.
 */
typedef struct MfTensor MfTensor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. Valid until the
 * next call into this library from the same thread.
 */
const char *mf_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mf_version(void);

/**
 * Linear-beta schedule over `num_steps` steps.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum MfStatus mf_schedule_new_linear(size_t num_steps,
                                     double beta_start,
                                     double beta_end,
                                     double eta,
                                     struct MfSchedule **out);

/**
 * The default beta range rescaled for a `num_steps`-step chain.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum MfStatus mf_schedule_new_scaled(size_t num_steps, double eta, struct MfSchedule **out);

/**
 * Number of steps, or 0 for a NULL handle.
 *
 * # Safety
 * `s` must be NULL or a live schedule handle.
 */
size_t mf_schedule_num_steps(const struct MfSchedule *s);

/**
 * Cumulative product `alpha_bar` at step `t`, `1 <= t <= num_steps`.
 *
 * # Safety
 * `s` must be a live schedule handle and `out` writable.
 */
enum MfStatus mf_schedule_alpha_bar(const struct MfSchedule *s, size_t t, double *out);

/**
 * Signal-to-noise ratio at step `t`.
 *
 * # Safety
 * `s` must be a live schedule handle and `out` writable.
 */
enum MfStatus mf_schedule_snr(const struct MfSchedule *s, size_t t, double *out);

/**
 * New schedule whose SNR is divided by `gamma` at every step.
 *
 * # Safety
 * `s` must be a live schedule handle and `out` writable.
 */
enum MfStatus mf_schedule_reschedule(const struct MfSchedule *s,
                                     double gamma,
                                     struct MfSchedule **out);

/**
 * Releases a schedule. NULL is ignored.
 *
 * # Safety
 * `s` must be NULL or a handle not yet freed.
 */
void mf_schedule_free(struct MfSchedule *s);

/**
 * Area-proportional cost of a named preset relative to running every step
 * at its final resolution.
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` writable.
 */
enum MfStatus mf_preset_cost_ratio(const char *name, double *out);

/**
 * Runs the sampler described by a JSON run config (the `mf` config format)
 * and returns the final image. `config_json` may be NULL for defaults;
 * `preset`, when not NULL, replaces the config's plan. Relative paths in the
 * config resolve against the working directory.
 *
 * # Safety
 * String arguments must be NULL or NUL-terminated; `out` must be writable.
 */
enum MfStatus mf_generate(const char *config_json,
                          const char *preset,
                          uint64_t seed,
                          struct MfTensor **out);

/**
 * Writes the tensor's channel, height and width. Any output may be NULL.
 *
 * # Safety
 * `t` must be a live tensor handle; non-NULL outputs must be writable.
 */
enum MfStatus mf_tensor_dims(const struct MfTensor *t,
                             size_t *channels,
                             size_t *height,
                             size_t *width);

/**
 * Borrowed pointer to the tensor's `channels * height * width` values,
 * valid until the tensor is freed.
 *
 * # Safety
 * `t` must be NULL or a live tensor handle.
 */
const double *mf_tensor_data(const struct MfTensor *t);

/**
 * Copies the values into `buf`, which must hold at least `len` doubles.
 *
 * # Safety
 * `t` must be a live tensor handle and `buf` valid for `len` writes.
 */
enum MfStatus mf_tensor_copy(const struct MfTensor *t, double *buf, size_t len);

/**
 * Releases a tensor. NULL is ignored.
 *
 * # Safety
 * `t` must be NULL or a handle not yet freed.
 */
void mf_tensor_free(struct MfTensor *t);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MEGAFUSION_H */
