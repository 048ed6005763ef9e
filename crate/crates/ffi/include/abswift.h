#ifndef ABSWIFT_H
#define ABSWIFT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum AbswiftStatus {
  ABSWIFT_STATUS_OK = 0,
  /**
   * Invalid configuration or unsupported request.
   */
  ABSWIFT_STATUS_CONFIG = 1,
  /**
   * Malformed, missing or out-of-range data.
   */
  ABSWIFT_STATUS_DATA = 2,
  /**
   * Non-finite values during computation.
   */
  ABSWIFT_STATUS_NUMERIC = 3,
  /**
   * A required pointer was null or a string was not UTF-8.
   */
  ABSWIFT_STATUS_INVALID_ARGUMENT = 4,
  /**
   * Unexpected internal failure.
   */
  ABSWIFT_STATUS_INTERNAL = 5,
} AbswiftStatus;

/**
 * Trained or freshly built model.
 */
typedef struct AbswiftModel AbswiftModel;

/**
 * One dataset sample.
 */
typedef struct AbswiftSample AbswiftSample;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `cap`). Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must be null or point to `cap` writable bytes.
 */
uintptr_t abswift_last_error(char *buf, uintptr_t cap);

/**
 * Library version as a static NUL-terminated string.
 */
const char *abswift_version(void);

/**
 * Builds a desk-size model with fresh weights. `variant` is 1 to 4.
 *
 * # Safety
 * `out` must be a valid pointer to write the handle to.
 */
enum AbswiftStatus abswift_model_build_desk(uint64_t seed,
                                            uint32_t variant,
                                            struct AbswiftModel **out);

/**
 * Loads a weight file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AbswiftStatus abswift_model_load(const char *path, struct AbswiftModel **out);

/**
 * Writes a weight file.
 *
 * # Safety
 * `model` must come from this library and `path` be NUL-terminated.
 */
enum AbswiftStatus abswift_model_save(const struct AbswiftModel *model, const char *path);

/**
 * # Safety
 * `model` must come from this library; `out` must be valid.
 */
enum AbswiftStatus abswift_model_num_params(const struct AbswiftModel *model, uint64_t *out);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void abswift_model_free(struct AbswiftModel *model);

/**
 * Loads a sample file.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` valid.
 */
enum AbswiftStatus abswift_sample_load(const char *path, struct AbswiftSample **out);

/**
 * Number of stored volume points.
 *
 * # Safety
 * `sample` must come from this library; `out` must be valid.
 */
enum AbswiftStatus abswift_sample_num_points(const struct AbswiftSample *sample, uint64_t *out);

/**
 * # Safety
 * `sample` must be null or a handle not yet freed.
 */
void abswift_sample_free(struct AbswiftSample *sample);

/**
 * Predicts `(vx, vy, vz, p, theta, k, eps)` at `n` points given in meters as
 * row-major `xyz` triples. Writes `7 * n` values to `fields`. The model must
 * carry normalization statistics, as trained weights do.
 *
 * # Safety
 * `coords` must hold `3 * n` readable values and `fields` `7 * n` writable ones.
 */
enum AbswiftStatus abswift_predict(const struct AbswiftModel *model,
                                   const struct AbswiftSample *sample,
                                   const double *coords,
                                   uintptr_t n,
                                   uint64_t seed,
                                   double *fields);

/**
 * Inflow profile `(speed, theta, k, eps)` at height `z` meters.
 *
 * # Safety
 * `out` must point to 4 writable values.
 */
enum AbswiftStatus abswift_profile_at(double inv_lmo, double z0, double z, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ABSWIFT_H */
