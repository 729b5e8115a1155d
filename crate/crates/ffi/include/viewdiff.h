#ifndef VIEWDIFF_H
#define VIEWDIFF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum VdStatus {
  VD_STATUS_OK = 0,
  VD_STATUS_NULL_POINTER = 1,
  VD_STATUS_INVALID_ARGUMENT = 2,
  VD_STATUS_SHAPE = 3,
  VD_STATUS_FORMAT = 4,
  VD_STATUS_HASH_MISMATCH = 5,
  VD_STATUS_NON_FINITE = 6,
  VD_STATUS_CONFIG = 7,
  VD_STATUS_IO = 8,
  VD_STATUS_TIMESTEP_RANGE = 9,
  VD_STATUS_BUFFER_TOO_SMALL = 10,
  VD_STATUS_PANIC = 11,
} VdStatus;

/**
 * Multi-view dataset held in memory.
 */
typedef struct VdDataset VdDataset;

/**
 * Frozen reference encoder.
 */
typedef struct VdEncoder VdEncoder;

/**
 * Denoiser restored from a checkpoint.
 */
typedef struct VdModel VdModel;

/**
 * Linear-beta noise schedule.
 */
typedef struct VdSchedule VdSchedule;

/**
 * Training timestep distribution over 1..=1000.
 */
typedef struct VdTimestepSampler VdTimestepSampler;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the calling thread's most recent failure; empty when none.
 * The pointer stays valid until the next failing call on this thread.
 */
const char *vd_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *vd_version(void);

/**
 * Linear schedule with `steps` steps and betas from `beta_start` to `beta_end`.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum VdStatus vd_schedule_new(uintptr_t steps,
                              double beta_start,
                              double beta_end,
                              struct VdSchedule **out);

/**
 * # Safety
 * `h` must be null or a handle from [`vd_schedule_new`] not yet freed.
 */
void vd_schedule_free(struct VdSchedule *h);

/**
 * Signal and noise coefficients `s_t = sqrt(alpha_bar_t)`, `sigma_t = sqrt(1 - alpha_bar_t)`.
 *
 * # Safety
 * `h` must be a live schedule handle; `s` and `sigma` must be writable.
 */
enum VdStatus vd_schedule_coefficients(const struct VdSchedule *h,
                                       uintptr_t t,
                                       double *s,
                                       double *sigma);

/**
 * `out = s_t * x0 + sigma_t * eps` over `len` values.
 *
 * # Safety
 * `x0`, `eps` and `out` must each point to `len` valid doubles.
 */
enum VdStatus vd_schedule_forward_diffuse(const struct VdSchedule *h,
                                          const double *x0,
                                          const double *eps,
                                          uintptr_t len,
                                          uintptr_t t,
                                          double *out);

/**
 * Uniform timestep distribution.
 *
 * # Safety
 * `out` must be writable.
 */
enum VdStatus vd_tsampler_new_uniform(struct VdTimestepSampler **out);

/**
 * Discretized Gaussian over 1..=1000, renormalized.
 *
 * # Safety
 * `out` must be writable.
 */
enum VdStatus vd_tsampler_new_gaussian(double mean, double std, struct VdTimestepSampler **out);

/**
 * # Safety
 * `h` must be null or a live sampler handle.
 */
void vd_tsampler_free(struct VdTimestepSampler *h);

/**
 * Probability of timestep `t`; 0 outside 1..=1000.
 *
 * # Safety
 * `h` must be a live sampler handle and `p` writable.
 */
enum VdStatus vd_tsampler_pmf(const struct VdTimestepSampler *h, uintptr_t t, double *p);

/**
 * Draws `n` timesteps from a ChaCha8 stream seeded with `seed`.
 *
 * # Safety
 * `out` must point to `n` writable `size_t` values.
 */
enum VdStatus vd_tsampler_sample(const struct VdTimestepSampler *h,
                                 uint64_t seed,
                                 uintptr_t n,
                                 uintptr_t *out);

/**
 * Renders `n_objects` objects with the default 12-view rig.
 *
 * # Safety
 * `out` must be writable.
 */
enum VdStatus vd_dataset_generate(uintptr_t n_objects, uint64_t seed, struct VdDataset **out);

/**
 * Loads an NVDS container.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string; `out` must be writable.
 */
enum VdStatus vd_dataset_load(const char *path, struct VdDataset **out);

/**
 * Writes the dataset as an NVDS container.
 *
 * # Safety
 * `h` must be live and `path` a NUL-terminated UTF-8 string.
 */
enum VdStatus vd_dataset_save(const struct VdDataset *h, const char *path);

/**
 * # Safety
 * `h` must be null or a live dataset handle.
 */
void vd_dataset_free(struct VdDataset *h);

/**
 * Object count, views per object and image size.
 *
 * # Safety
 * `h` must be live; every output pointer must be writable.
 */
enum VdStatus vd_dataset_info(const struct VdDataset *h,
                              uintptr_t *n_objects,
                              uintptr_t *views,
                              uintptr_t *height,
                              uintptr_t *width);

/**
 * Copies the RGBA bytes of one view (`height * width * 4`) into `buf`.
 *
 * # Safety
 * `buf` must point to `len` writable bytes.
 */
enum VdStatus vd_dataset_view_rgba(const struct VdDataset *h,
                                   uintptr_t object,
                                   uintptr_t view,
                                   uint8_t *buf,
                                   uintptr_t len);

/**
 * Loads an encoder file; the returned encoder is frozen.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string; `out` must be writable.
 */
enum VdStatus vd_encoder_load(const char *path, struct VdEncoder **out);

/**
 * # Safety
 * `h` must be null or a live encoder handle.
 */
void vd_encoder_free(struct VdEncoder *h);

/**
 * Restores the EMA denoiser stored in a checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string; `out` must be writable.
 */
enum VdStatus vd_model_load(const char *path, struct VdModel **out);

/**
 * # Safety
 * `h` must be null or a live model handle.
 */
void vd_model_free(struct VdModel *h);

/**
 * Number of scalar parameters.
 *
 * # Safety
 * `h` must be live and `out` writable.
 */
enum VdStatus vd_model_num_params(const struct VdModel *h, uintptr_t *out);

/**
 * Samples view `target` of `object` conditioned on view `reference`.
 *
 * Writes `3 * height * width` planar values in `[-1, 1]` to `out`.
 *
 * # Safety
 * All handles must be live; `out` must point to `len` writable doubles.
 */
enum VdStatus vd_sample(const struct VdModel *model,
                        const struct VdEncoder *encoder,
                        const struct VdDataset *dataset,
                        uintptr_t object,
                        uintptr_t reference,
                        uintptr_t target,
                        uintptr_t steps,
                        double eta,
                        uint64_t seed,
                        double *out,
                        uintptr_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VIEWDIFF_H */
