#ifndef APAM_H
#define APAM_H

/* Generated by cbindgen from crates/ffi; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ApamStatus {
  APAM_STATUS_OK = 0,
  APAM_STATUS_NULL_POINTER = 1,
  APAM_STATUS_INVALID_ARGUMENT = 2,
  APAM_STATUS_IO = 3,
  APAM_STATUS_FORMAT = 4,
  APAM_STATUS_SHAPE = 5,
  APAM_STATUS_CONFIG = 6,
  APAM_STATUS_NON_FINITE = 7,
  APAM_STATUS_CHECKSUM = 8,
  APAM_STATUS_VERSION = 9,
  APAM_STATUS_SEGMENTER = 10,
  APAM_STATUS_BUFFER_TOO_SMALL = 11,
  APAM_STATUS_PANIC = 12,
} ApamStatus;

// Loaded model checkpoint.
typedef struct ApamModel ApamModel;

// Loaded prior map set.
typedef struct ApamPriorSet ApamPriorSet;

// Half-open box `[x_min, x_max) x [y_min, y_max)` in pixels.
typedef struct ApamBBox {
  double x_min;
  double y_min;
  double x_max;
  double y_max;
} ApamBBox;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread; empty if none. The pointer
// stays valid until the next failing call on this thread.
const char *apam_last_error_message(void);

// Library version as a static string.
const char *apam_version(void);

// Mann-Whitney ROC-AUC of `n` scores against 0/1 labels.
//
// # Safety
// `scores` and `labels` point to `n` elements; `out` is writable.
enum ApamStatus apam_roc_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

// Intersection over union of two boxes.
//
// # Safety
// `a`, `b` and `out` point to valid objects.
enum ApamStatus apam_iou(const struct ApamBBox *a, const struct ApamBBox *b, double *out);

// Bilinear upsample to `edge x edge`, min-max scale to 0..=255. A constant
// map gives zeros.
//
// # Safety
// `heatmap` holds `height * width` values; `out` holds `edge * edge`.
enum ApamStatus apam_normalize_heatmap(const double *heatmap,
                                       size_t height,
                                       size_t width,
                                       size_t edge,
                                       uint8_t *out);

// Outer-contour boxes of a binary mask (nonzero is foreground). Writes up
// to `capacity` boxes and the total count to `out_count`; returns
// `BUFFER_TOO_SMALL` when the count exceeds `capacity`.
//
// # Safety
// `mask` holds `height * width` bytes; `out` holds `capacity` boxes (may be
// null when `capacity` is 0); `out_count` is writable.
enum ApamStatus apam_extract_boxes(const uint8_t *mask,
                                   size_t height,
                                   size_t width,
                                   struct ApamBBox *out,
                                   size_t capacity,
                                   size_t *out_count);

// Chest ROI mask of a grayscale image in [0, 1] using the built-in Otsu
// lung segmenter. Writes 0/1 bytes.
//
// # Safety
// `gray` holds `height * width` values; `out` holds as many bytes.
enum ApamStatus apam_roi_mask(const double *gray,
                              size_t height,
                              size_t width,
                              size_t radius,
                              uint8_t *out);

// Loads a prior map directory written by `apam gen-priors`.
//
// # Safety
// `dir` is a NUL-terminated path; `out` is writable.
enum ApamStatus apam_prior_set_load(const char *dir, struct ApamPriorSet **out);

// # Safety
// `set` is null or a handle from [`apam_prior_set_load`] not yet freed.
void apam_prior_set_free(struct ApamPriorSet *set);

// Number of classes, or 0 for a null handle.
//
// # Safety
// `set` is null or a live handle.
size_t apam_prior_set_num_classes(const struct ApamPriorSet *set);

// Class name owned by the handle, or null when out of range.
//
// # Safety
// `set` is null or a live handle.
const char *apam_prior_set_class_name(const struct ApamPriorSet *set, size_t class_id);

// Map resolution.
//
// # Safety
// `set` is a live handle; `height` and `width` are writable.
enum ApamStatus apam_prior_set_resolution(const struct ApamPriorSet *set,
                                          size_t *height,
                                          size_t *width);

// Copies the normalized map of `class_id` into `out`.
//
// # Safety
// `set` is a live handle; `out` holds `capacity` values.
enum ApamStatus apam_prior_set_map(const struct ApamPriorSet *set,
                                   size_t class_id,
                                   double *out,
                                   size_t capacity);

// Loads a checkpoint written by `apam train`.
//
// # Safety
// `path` is a NUL-terminated path; `out` is writable.
enum ApamStatus apam_model_load(const char *path, struct ApamModel **out);

// # Safety
// `model` is null or a handle from [`apam_model_load`] not yet freed.
void apam_model_free(struct ApamModel *model);

// Input geometry: class count `K`, image edge `E` and feature map size
// `h x w`. Also reports whether ROI masks and prior maps are consumed.
//
// # Safety
// `model` is a live handle; every out pointer is writable.
enum ApamStatus apam_model_shape(const struct ApamModel *model,
                                 size_t *num_classes,
                                 size_t *input_edge,
                                 size_t *feature_height,
                                 size_t *feature_width,
                                 bool *uses_roi,
                                 bool *uses_priors);

// Inference on `n` preprocessed images (`n x 3 x E x E`). `roi`
// (`n x 1 x h x w`) and `priors` (`n x K x h x w`) may be null when the
// model does not use them. Writes sigmoid probabilities (`n x K`) and,
// when `cams` is not null, class activation maps (`n x K x h x w`).
//
// # Safety
// Every non-null buffer has the size stated above.
enum ApamStatus apam_model_predict(const struct ApamModel *model,
                                   size_t n,
                                   const double *images,
                                   const double *roi,
                                   const double *priors,
                                   double *probs,
                                   double *cams);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* APAM_H */
