#ifndef PALORA_H
#define PALORA_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PaloraStatus {
  PALORA_STATUS_OK = 0,
  PALORA_STATUS_NULL_POINTER = 1,
  PALORA_STATUS_INVALID_ARGUMENT = 2,
  PALORA_STATUS_DIMENSION = 3,
  PALORA_STATUS_CONTRACT = 4,
  PALORA_STATUS_CONVERGENCE = 5,
  PALORA_STATUS_DIVERGENCE = 6,
  PALORA_STATUS_CONFIG = 7,
  PALORA_STATUS_FORMAT = 8,
  PALORA_STATUS_IO = 9,
  PALORA_STATUS_UTF8 = 10,
  PALORA_STATUS_PANIC = 11,
} PaloraStatus;

/**
 * A parsed experiment configuration.
 */
typedef struct PaloraConfig PaloraConfig;

/**
 * A row/column mask pair for one adapter.
 */
typedef struct PaloraMask PaloraMask;

/**
 * A frozen base model.
 */
typedef struct PaloraModel PaloraModel;

/**
 * A per-layer sparsity profile.
 */
typedef struct PaloraProfile PaloraProfile;

/**
 * One layer of a sparsity profile.
 */
typedef struct PaloraLayerRatio {
  size_t rows;
  size_t cols;
  size_t retained_rows;
  size_t retained_cols;
  double p_row;
  double p_col;
  double element_rate;
} PaloraLayerRatio;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *palora_version(void);

/**
 * Message of the last failure on this thread, or NULL. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *palora_last_error(void);

/**
 * Parse a TOML experiment configuration.
 *
 * # Safety
 * `toml` must be a NUL-terminated string and `out_config` writable.
 */
enum PaloraStatus palora_config_from_toml(const char *toml, struct PaloraConfig **out_config);

/**
 * # Safety
 * `config` must come from [`palora_config_from_toml`] or be NULL.
 */
void palora_config_free(struct PaloraConfig *config);

/**
 * Pretrain the base model described by `config`.
 *
 * # Safety
 * `config` must be a live handle and `out_model` writable.
 */
enum PaloraStatus palora_pretrain(const struct PaloraConfig *config,
                                  struct PaloraModel **out_model);

/**
 * Load a base model from a checkpoint file. Any adapters stored alongside
 * it are ignored.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out_model` writable.
 */
enum PaloraStatus palora_model_load(const char *path, struct PaloraModel **out_model);

/**
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum PaloraStatus palora_model_save(const struct PaloraModel *model, const char *path);

/**
 * # Safety
 * `model` must be a handle produced by this library or NULL.
 */
void palora_model_free(struct PaloraModel *model);

/**
 * Number of weight layers, or 0 for a NULL handle.
 *
 * # Safety
 * `model` must be a live handle or NULL.
 */
size_t palora_model_depth(const struct PaloraModel *model);

/**
 * Output and input width of weight layer `layer`.
 *
 * # Safety
 * `model` must be a live handle; `rows` and `cols` writable.
 */
enum PaloraStatus palora_model_layer_dims(const struct PaloraModel *model,
                                          size_t layer,
                                          size_t *rows,
                                          size_t *cols);

/**
 * SHA-256 of the frozen weights, written to a 32-byte buffer.
 *
 * # Safety
 * `out_digest` must point to 32 writable bytes.
 */
enum PaloraStatus palora_model_hash(const struct PaloraModel *model, uint8_t *out_digest);

/**
 * Frozen forward pass. `inputs` holds `input_dim x samples` values in
 * row-major order (one column per sample); `logits` receives
 * `classes x samples` values in the same layout.
 *
 * # Safety
 * `inputs` must hold `inputs_len` readable values and `logits` `logits_len`
 * writable values.
 */
enum PaloraStatus palora_model_forward(const struct PaloraModel *model,
                                       const double *inputs,
                                       size_t inputs_len,
                                       size_t samples,
                                       double *logits,
                                       size_t logits_len);

/**
 * Derive a per-layer sparsity profile for `model` on the downstream task
 * of `config`.
 *
 * # Safety
 * Both handles must be live and `out_profile` writable.
 */
enum PaloraStatus palora_derive(const struct PaloraModel *model,
                                const struct PaloraConfig *config,
                                struct PaloraProfile **out_profile);

/**
 * Number of layers in a profile, or 0 for a NULL handle.
 *
 * # Safety
 * `profile` must be a live handle or NULL.
 */
size_t palora_profile_len(const struct PaloraProfile *profile);

/**
 * # Safety
 * `profile` must be a live handle and `out_ratio` writable.
 */
enum PaloraStatus palora_profile_layer(const struct PaloraProfile *profile,
                                       size_t layer,
                                       struct PaloraLayerRatio *out_ratio);

/**
 * # Safety
 * `profile` must be a handle produced by this library or NULL.
 */
void palora_profile_free(struct PaloraProfile *profile);

/**
 * Sample a row/column mask pair for an `rows x cols` weight.
 *
 * # Safety
 * `out_mask` must be writable.
 */
enum PaloraStatus palora_mask_sample(size_t rows,
                                     size_t cols,
                                     double p_row,
                                     double p_col,
                                     uint64_t seed,
                                     struct PaloraMask **out_mask);

/**
 * Fraction of weight entries the mask leaves trainable, or NaN for NULL.
 *
 * # Safety
 * `mask` must be a live handle or NULL.
 */
double palora_mask_element_rate(const struct PaloraMask *mask);

/**
 * Jaccard overlap of the trainable entries of two masks of equal shape.
 *
 * # Safety
 * Both handles must be live and `out_overlap` writable.
 */
enum PaloraStatus palora_mask_overlap(const struct PaloraMask *a,
                                      const struct PaloraMask *b,
                                      double *out_overlap);

/**
 * # Safety
 * `mask` must be a handle produced by this library or NULL.
 */
void palora_mask_free(struct PaloraMask *mask);

/**
 * Per-layer concentration constant of the width bound.
 *
 * # Safety
 * `out_value` must be writable.
 */
enum PaloraStatus palora_slt_rho(double c,
                                 double n_t,
                                 double min_p,
                                 double gamma,
                                 double min_eps_l,
                                 double delta,
                                 double *out_value);

/**
 * Per-layer error budget. `later_norms` holds `later_len` operator norms
 * of the layers after this one and may be NULL when `later_len` is 0.
 *
 * # Safety
 * `later_norms` must hold `later_len` readable values; `out_value` writable.
 */
enum PaloraStatus palora_slt_epsilon_l(double eps,
                                       double n_lora_last,
                                       size_t depth,
                                       double b_prev,
                                       const double *later_norms,
                                       size_t later_len,
                                       double *out_value);

/**
 * Minimum wide-layer width guaranteeing the approximation.
 *
 * # Safety
 * `out_width` must be writable.
 */
enum PaloraStatus palora_slt_width_bound(size_t n_t,
                                         double p_next,
                                         double eps_l,
                                         double delta,
                                         double rho,
                                         double c,
                                         uint64_t *out_width);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PALORA_H */
