#ifndef UNIADET_H
#define UNIADET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum {
  UAD_STATUS_OK = 0,
  /**
   * Null pointer, bad length or non-UTF-8 string.
   */
  UAD_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Malformed input data or a failed consistency check.
   */
  UAD_STATUS_VALIDATION = 2,
  /**
   * Non-finite intermediate values.
   */
  UAD_STATUS_NUMERIC = 3,
  UAD_STATUS_IO = 4,
  /**
   * Weights, bank and features do not fit together.
   */
  UAD_STATUS_INCOMPATIBLE = 5,
  /**
   * A metric is undefined for the given labels.
   */
  UAD_STATUS_UNDEFINED = 6,
  /**
   * Internal panic; the library state is unchanged.
   */
  UAD_STATUS_PANIC = 7,
} UadStatus;

/**
 * Few-shot memory of normal patch tokens.
 */
typedef struct UadBank UadBank;

/**
 * Features of one image.
 */
typedef struct UadFeatures UadFeatures;

/**
 * Trained weights.
 */
typedef struct UadWeights UadWeights;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until
 * the next call into the library on the same thread.
 */
const char *uad_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *uad_version(void);

/**
 * Loads a weight file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
UadStatus uad_weights_load(const char *path, UadWeights **out);

/**
 * Number of layers, or 0 for a null handle.
 *
 * # Safety
 * `weights` must be null or a live handle.
 */
size_t uad_weights_layers(const UadWeights *weights);

/**
 * Overrides the stored fusion parameters.
 *
 * # Safety
 * `weights` must be a live handle.
 */
UadStatus uad_weights_set_fusion(UadWeights *weights, float tau, float lambda_p, float lambda_f);

/**
 * # Safety
 * `weights` must be null or a handle from [`uad_weights_load`], freed once.
 */
void uad_weights_free(UadWeights *weights);

/**
 * Loads a feature file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
UadStatus uad_features_load(const char *path, UadFeatures **out);

/**
 * Decodes an in-memory feature file.
 *
 * # Safety
 * `bytes` must point to `len` readable bytes and `out` be a valid pointer.
 */
UadStatus uad_features_decode(const uint8_t *bytes, size_t len, UadFeatures **out);

/**
 * Image size the features were extracted from; the map buffer passed to
 * [`uad_predict`] must hold `height * width` values.
 *
 * # Safety
 * `features` must be a live handle; outputs must be valid pointers.
 */
UadStatus uad_features_image_size(const UadFeatures *features, size_t *height, size_t *width);

/**
 * # Safety
 * `features` must be null or a handle from this library, freed once.
 */
void uad_features_free(UadFeatures *features);

/**
 * Builds a memory bank from `count` reference feature handles.
 *
 * # Safety
 * `refs` must point to `count` live feature handles; `out` must be valid.
 */
UadStatus uad_bank_build(const UadFeatures *const *refs, size_t count, UadBank **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
UadStatus uad_bank_load(const char *path, UadBank **out);

/**
 * # Safety
 * `bank` must be a live handle and `path` a NUL-terminated string.
 */
UadStatus uad_bank_save(const UadBank *bank, const char *path);

/**
 * # Safety
 * `bank` must be null or a handle from this library, freed once.
 */
void uad_bank_free(UadBank *bank);

/**
 * Predicts one image. With a null `bank` the prediction is zero-shot.
 * A `distance_scale` of 0 selects the default. `map` receives the
 * row-major `height * width` anomaly map and `score` the image score.
 *
 * # Safety
 * Handles must be live (`bank` may be null); `map` must hold `map_len`
 * doubles; `score` must be valid.
 */
UadStatus uad_predict(const UadWeights *weights,
                      const UadFeatures *features,
                      const UadBank *bank,
                      double distance_scale,
                      double *map,
                      size_t map_len,
                      double *score);

/**
 * Area under the ROC curve; nonzero labels are positives.
 *
 * # Safety
 * `scores` and `labels` must hold `n` elements; `out` must be valid.
 */
UadStatus uad_auroc(const double *scores, const uint8_t *labels, size_t n, double *out);

/**
 * Average precision.
 *
 * # Safety
 * As [`uad_auroc`].
 */
UadStatus uad_aupr(const double *scores, const uint8_t *labels, size_t n, double *out);

/**
 * Best F1 over all thresholds.
 *
 * # Safety
 * As [`uad_auroc`].
 */
UadStatus uad_f1max(const double *scores, const uint8_t *labels, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UNIADET_H */
