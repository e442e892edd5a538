#ifndef LUMEN_H
#define LUMEN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Object materials, matching the library's presets.
 */
typedef enum LumenMaterial {
  LUMEN_MATERIAL_DIFFUSE = 0,
  LUMEN_MATERIAL_ROUGH = 1,
  LUMEN_MATERIAL_GLOSSY = 2,
} LumenMaterial;

/**
 * Result code of every fallible call.
 */
typedef enum LumenStatus {
  LUMEN_STATUS_OK = 0,
  LUMEN_STATUS_INVALID_ARGUMENT = 1,
  LUMEN_STATUS_FORMAT = 2,
  LUMEN_STATUS_UNSUPPORTED_FORMAT = 3,
  LUMEN_STATUS_DEGENERATE_EXPOSURE = 4,
  LUMEN_STATUS_ILL_CONDITIONED = 5,
  LUMEN_STATUS_RESOURCE = 6,
  LUMEN_STATUS_STATE = 7,
  LUMEN_STATUS_TRAINING_DIVERGED = 8,
  LUMEN_STATUS_DATASET = 9,
  LUMEN_STATUS_CONFIG = 10,
  LUMEN_STATUS_IO = 11,
  LUMEN_STATUS_NULL_POINTER = 12,
  LUMEN_STATUS_BUFFER_TOO_SMALL = 13,
  LUMEN_STATUS_PANIC = 14,
} LumenStatus;

typedef struct LumenAutoencoder LumenAutoencoder;

/**
 * Equirectangular HDR environment map.
 */
typedef struct LumenEnvMap LumenEnvMap;

typedef struct LumenPredictor LumenPredictor;

/**
 * Real SH coefficients, three channels.
 */
typedef struct LumenShCoeffs LumenShCoeffs;

/**
 * Solid-angle weighted comparison of two maps.
 */
typedef struct LumenScores {
  double rmse;
  double si_rmse;
  double alpha;
  double mae;
  double mre;
} LumenScores;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message, NUL-terminated and
 * truncated to `capacity` bytes. Returns the full message length.
 *
 * # Safety
 * `buf` must be null or valid for `capacity` bytes.
 */
size_t lumen_last_error(char *buf, size_t capacity);

/**
 * Library version as a static NUL-terminated string.
 */
const char *lumen_version(void);

/**
 * Creates a map from `height * 2 height * 3` interleaved RGB values.
 *
 * # Safety
 * `data` must be valid for `len` reads and `out` for one write.
 */
enum LumenStatus lumen_envmap_new(size_t height,
                                  size_t width,
                                  const double *data,
                                  size_t len,
                                  struct LumenEnvMap **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` valid for one write.
 */
enum LumenStatus lumen_envmap_read_pfm(const char *path_, struct LumenEnvMap **out);

/**
 * # Safety
 * `env` must be a live handle and `path` a NUL-terminated string.
 */
enum LumenStatus lumen_envmap_write_pfm(const struct LumenEnvMap *env, const char *path_);

/**
 * Height and width of a map; zeros for a null handle.
 *
 * # Safety
 * `env` must be null or a live handle; `height`, `width` null or writable.
 */
void lumen_envmap_size(const struct LumenEnvMap *env, size_t *height, size_t *width);

/**
 * Copies the interleaved RGB values into `buf`.
 *
 * # Safety
 * `env` must be a live handle and `buf` valid for `len` writes.
 */
enum LumenStatus lumen_envmap_copy_data(const struct LumenEnvMap *env, double *buf, size_t len);

/**
 * # Safety
 * `env` must be null or a handle not yet freed.
 */
void lumen_envmap_free(struct LumenEnvMap *env);

/**
 * Per-pixel solid angles of a `height x width` grid, row-major.
 *
 * # Safety
 * `buf` must be valid for `len` writes.
 */
enum LumenStatus lumen_solid_angle_weights(size_t height, size_t width, double *buf, size_t len);

/**
 * Coefficient count `(degree + 1)^2` per channel.
 *
 * # Safety
 * `out` must be valid for one write.
 */
enum LumenStatus lumen_sh_num_coeffs(int64_t degree, size_t *out);

/**
 * # Safety
 * `env` must be a live handle and `out` valid for one write.
 */
enum LumenStatus lumen_sh_project(const struct LumenEnvMap *env,
                                  size_t degree,
                                  struct LumenShCoeffs **out);

/**
 * Reconstructs a `height x 2 height` map, clamped at zero.
 *
 * # Safety
 * `coeffs` must be a live handle and `out` valid for one write.
 */
enum LumenStatus lumen_sh_reconstruct(const struct LumenShCoeffs *coeffs,
                                      size_t height,
                                      struct LumenEnvMap **out);

/**
 * Degree of a coefficient set, or -1 for a null handle.
 *
 * # Safety
 * `coeffs` must be null or a live handle.
 */
int64_t lumen_sh_degree(const struct LumenShCoeffs *coeffs);

/**
 * Copies coefficients `k`-major, channel-minor: `3 (degree + 1)^2` values.
 *
 * # Safety
 * `coeffs` must be a live handle and `buf` valid for `len` writes.
 */
enum LumenStatus lumen_sh_copy_data(const struct LumenShCoeffs *coeffs, double *buf, size_t len);

/**
 * # Safety
 * `coeffs` must be null or a handle not yet freed.
 */
void lumen_sh_free(struct LumenShCoeffs *coeffs);

/**
 * Fits degree-`degree` SH lighting to a `size x size` RGB object image
 * through the transport of the given normals and material on a
 * `env_height x 2 env_height` grid. A negative `lambda` selects the default
 * ridge weight. `residual` (three values) may be null.
 *
 * # Safety
 * `image` must hold `size * size * 3` values; `normals` is null or holds as
 * many; `out` must be valid for one write.
 */
enum LumenStatus lumen_sh_fit(const double *image,
                              const double *normals,
                              size_t size,
                              enum LumenMaterial material,
                              size_t degree,
                              double lambda,
                              size_t env_height,
                              double *residual,
                              struct LumenShCoeffs **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` valid for one write.
 */
enum LumenStatus lumen_autoencoder_load(const char *path_, struct LumenAutoencoder **out);

/**
 * Latent size Z, or 0 for a null handle.
 *
 * # Safety
 * `ae` must be null or a live handle.
 */
size_t lumen_autoencoder_latent(const struct LumenAutoencoder *ae);

/**
 * Writes the Z-value code of `env` into `code`.
 *
 * # Safety
 * Handles must be live and `code` valid for `len` writes.
 */
enum LumenStatus lumen_autoencoder_encode(const struct LumenAutoencoder *ae,
                                          const struct LumenEnvMap *env,
                                          float *code,
                                          size_t len);

/**
 * # Safety
 * `ae` must be live, `code` valid for `len` reads, `out` for one write.
 */
enum LumenStatus lumen_autoencoder_decode(const struct LumenAutoencoder *ae,
                                          const float *code,
                                          size_t len,
                                          struct LumenEnvMap **out);

/**
 * # Safety
 * `ae` must be null or a handle not yet freed.
 */
void lumen_autoencoder_free(struct LumenAutoencoder *ae);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` valid for one write.
 */
enum LumenStatus lumen_predictor_load(const char *path_, struct LumenPredictor **out);

/**
 * # Safety
 * `ip` must be null or a handle not yet freed.
 */
void lumen_predictor_free(struct LumenPredictor *ip);

/**
 * Predicts lighting from a `size x size` LDR image and its normals (null
 * for the sphere). `latency_ms` may be null.
 *
 * # Safety
 * Handles must be live; `rgb` holds `size * size * 3` values, `normals` is
 * null or holds as many; `out` must be valid for one write.
 */
enum LumenStatus lumen_predict_lighting(const struct LumenPredictor *ip,
                                        const struct LumenAutoencoder *ae,
                                        const double *rgb,
                                        const double *normals,
                                        size_t size,
                                        double *latency_ms,
                                        struct LumenEnvMap **out);

/**
 * Scores `pred` against `truth` under solid-angle weights.
 *
 * # Safety
 * Handles must be live and `out` valid for one write.
 */
enum LumenStatus lumen_envmap_compare(const struct LumenEnvMap *pred,
                                      const struct LumenEnvMap *truth,
                                      struct LumenScores *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LUMEN_H */
