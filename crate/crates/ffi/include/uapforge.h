#ifndef UAPFORGE_H
#define UAPFORGE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum UapStatus {
  UAP_STATUS_OK = 0,
  UAP_STATUS_FAILURE = 1,
  UAP_STATUS_CONFIG = 2,
  UAP_STATUS_DIVERGENCE = 3,
  UAP_STATUS_CRAFT_NUMERICAL = 4,
  UAP_STATUS_MISSING_ARTIFACT = 5,
  UAP_STATUS_NULL_POINTER = 6,
  UAP_STATUS_INVALID_UTF8 = 7,
  UAP_STATUS_PANIC = 8,
} UapStatus;

/**
 * Samples with pixel values in [0, 1], held in 64-bit precision.
 */
typedef struct UapDataset UapDataset;

/**
 * A universal perturbation.
 */
typedef struct UapDelta UapDelta;

/**
 * A trained model loaded from a checkpoint.
 */
typedef struct UapModel UapModel;

/**
 * Outcome of a fooling-ratio evaluation.
 */
typedef struct UapFoolingReport {
  size_t n_evaluated;
  size_t n_changed;
  double fooling_ratio;
  double delta_linf;
} UapFoolingReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty if none. Valid until
 * the next failing call on the same thread.
 */
const char *uap_last_error(void);

/**
 * Loads a checkpoint (parameter file plus its `.json` sidecar).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum UapStatus uap_model_load(const char *path, struct UapModel **out);

/**
 * # Safety
 * `model` must come from [`uap_model_load`] and not be used afterwards. Null is ignored.
 */
void uap_model_free(struct UapModel *model);

/**
 * Number of values in one input sample.
 *
 * # Safety
 * `model` must be a live handle.
 */
size_t uap_model_input_len(const struct UapModel *model);

/**
 * # Safety
 * `model` must be a live handle.
 */
size_t uap_model_num_classes(const struct UapModel *model);

/**
 * Predicted class of `n` samples stored back to back in `x`
 * (`n * uap_model_input_len` values); writes `n` labels to `labels`.
 *
 * # Safety
 * `x` must hold `n * input_len` doubles and `labels` room for `n` values.
 */
enum UapStatus uap_model_predict(const struct UapModel *model,
                                 const double *x,
                                 size_t n,
                                 size_t *labels);

/**
 * Loads an IDX image/label file pair.
 *
 * # Safety
 * Both paths must be NUL-terminated strings; `out` must be writable.
 */
enum UapStatus uap_dataset_load_idx(const char *images,
                                    const char *labels,
                                    struct UapDataset **out);

/**
 * Generates the synthetic glyph dataset. `params_json` holds any subset of
 * the glyph parameters (`num_classes`, `n`, `side`, `strokes`, `max_shift`,
 * `noise`, `seed`); null uses the defaults.
 *
 * # Safety
 * `params_json` must be null or NUL-terminated; `out` must be writable.
 */
enum UapStatus uap_dataset_glyphs(const char *params_json, struct UapDataset **out);

/**
 * Seeded subset of `size` samples.
 *
 * # Safety
 * `dataset` must be a live handle; `out` must be writable.
 */
enum UapStatus uap_dataset_subset(const struct UapDataset *dataset,
                                  size_t size,
                                  uint64_t seed,
                                  struct UapDataset **out);

/**
 * # Safety
 * `dataset` must be a live handle or null.
 */
size_t uap_dataset_len(const struct UapDataset *dataset);

/**
 * # Safety
 * `dataset` must come from a `uap_dataset_*` constructor and not be used afterwards. Null is ignored.
 */
void uap_dataset_free(struct UapDataset *dataset);

/**
 * Crafts a perturbation against `model` on `dataset`. `config_json` is a run
 * config document (only `seed` and `attack` matter here); null uses the defaults.
 *
 * # Safety
 * Handles must be live; `config_json` null or NUL-terminated; `out` writable.
 */
enum UapStatus uap_craft(const struct UapModel *model,
                         const struct UapDataset *dataset,
                         const char *config_json,
                         struct UapDelta **out);

/**
 * Loads a perturbation tensor file.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` writable.
 */
enum UapStatus uap_delta_load(const char *path, struct UapDelta **out);

/**
 * Writes the perturbation as a tensor file.
 *
 * # Safety
 * `delta` must be live; `path` NUL-terminated.
 */
enum UapStatus uap_delta_save(const struct UapDelta *delta, const char *path);

/**
 * Number of values in the perturbation.
 *
 * # Safety
 * `delta` must be a live handle or null.
 */
size_t uap_delta_len(const struct UapDelta *delta);

/**
 * Copies the perturbation into `buf`, which must hold exactly `uap_delta_len` doubles.
 *
 * # Safety
 * `delta` must be live; `buf` must have room for `len` doubles.
 */
enum UapStatus uap_delta_copy(const struct UapDelta *delta, double *buf, size_t len);

/**
 * # Safety
 * `delta` must come from [`uap_craft`] or [`uap_delta_load`] and not be used afterwards. Null is ignored.
 */
void uap_delta_free(struct UapDelta *delta);

/**
 * Fraction of `dataset` whose prediction changes under `delta`, using
 * `width` threads (0 or 1 is serial).
 *
 * # Safety
 * Handles must be live; `out` writable.
 */
enum UapStatus uap_fooling_ratio(const struct UapModel *model,
                                 const struct UapDataset *dataset,
                                 const struct UapDelta *delta,
                                 size_t width,
                                 struct UapFoolingReport *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UAPFORGE_H */
