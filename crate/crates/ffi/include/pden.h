#ifndef PDEN_H
#define PDEN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum PdenStatus {
  PDEN_STATUS_OK = 0,
  PDEN_STATUS_NULL_POINTER = 1,
  PDEN_STATUS_INVALID_ARGUMENT = 2,
  PDEN_STATUS_SHAPE = 3,
  PDEN_STATUS_FORMAT = 4,
  PDEN_STATUS_IO = 5,
  PDEN_STATUS_CONFIG = 6,
  PDEN_STATUS_NUMERIC = 7,
  PDEN_STATUS_INTERNAL = 8,
} PdenStatus;

/**
 * A labeled image set.
 */
typedef struct PdenDataset PdenDataset;

/**
 * A task model loaded from a checkpoint.
 */
typedef struct PdenModel PdenModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * Valid until the next `pden_*` call on the same thread.
 */
const char *pden_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *pden_version(void);

/**
 * Synthetic glyph dataset of `count` balanced images.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum PdenStatus pden_dataset_toy(size_t classes,
                                 size_t count,
                                 size_t image_size,
                                 uint64_t seed,
                                 struct PdenDataset **out);

/**
 * Loads an IDX image/label pair; `limit` of 0 loads everything.
 *
 * # Safety
 * Paths must be NUL-terminated strings; `out` must be valid for writes.
 */
enum PdenStatus pden_dataset_load_idx(const char *images_path,
                                      const char *labels_path,
                                      size_t limit,
                                      struct PdenDataset **out);

/**
 * Zero-pads to `size×size` and replicates a single channel to `channels`.
 *
 * # Safety
 * `ds` must be a live dataset handle; `out` must be valid for writes.
 */
enum PdenStatus pden_dataset_to_layout(const struct PdenDataset *ds,
                                       size_t channels,
                                       size_t size,
                                       struct PdenDataset **out);

/**
 * Shifted copy of a dataset. `kind` is one of `invert`, `gaussian_noise`,
 * `contrast`, `brightness`, `blur`, `pixelate`, `speckle`; `severity` is 1..=5.
 *
 * # Safety
 * `ds` must be a live dataset handle, `kind` a NUL-terminated string and
 * `out` valid for writes.
 */
enum PdenStatus pden_dataset_shift(const struct PdenDataset *ds,
                                   const char *kind,
                                   uint8_t severity,
                                   uint64_t seed,
                                   struct PdenDataset **out);

/**
 * Item count and image dimensions. Any output pointer may be null.
 *
 * # Safety
 * `ds` must be a live dataset handle; non-null outputs must be valid for writes.
 */
enum PdenStatus pden_dataset_shape(const struct PdenDataset *ds,
                                   size_t *len,
                                   size_t *channels,
                                   size_t *height,
                                   size_t *width);

/**
 * Copies pixels (`len·C·H·W` doubles in `[0, 1]`, row-major) and labels
 * into caller buffers. Either buffer may be null.
 *
 * # Safety
 * Non-null buffers must hold at least the stated number of elements.
 */
enum PdenStatus pden_dataset_copy(const struct PdenDataset *ds,
                                  double *images,
                                  size_t images_len,
                                  uint32_t *labels,
                                  size_t labels_len);

/**
 * # Safety
 * `ds` must be null or a handle not yet freed.
 */
void pden_dataset_free(struct PdenDataset *ds);

/**
 * Loads a task-model checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum PdenStatus pden_model_load(const char *path, struct PdenModel **out);

/**
 * Expected input layout and class count. Any output pointer may be null.
 *
 * # Safety
 * `model` must be a live model handle; non-null outputs must be valid for writes.
 */
enum PdenStatus pden_model_shape(const struct PdenModel *model,
                                 size_t *channels,
                                 size_t *image_size,
                                 size_t *classes);

/**
 * Argmax accuracy on a dataset.
 *
 * # Safety
 * Handles must be live; `accuracy` must be valid for writes.
 */
enum PdenStatus pden_model_evaluate(const struct PdenModel *model,
                                    const struct PdenDataset *ds,
                                    double *accuracy);

/**
 * Class probabilities for `count` images laid out as in
 * [`pden_dataset_copy`]. Writes `count` argmax labels and, when `probs` is
 * non-null, `count·classes` probabilities.
 *
 * # Safety
 * `images` must hold `count·C·H·W` doubles matching [`pden_model_shape`];
 * `labels` must hold `count` entries and non-null `probs` `count·classes`.
 */
enum PdenStatus pden_model_predict(const struct PdenModel *model,
                                   const double *images,
                                   size_t count,
                                   uint32_t *labels,
                                   double *probs);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void pden_model_free(struct PdenModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PDEN_H */
