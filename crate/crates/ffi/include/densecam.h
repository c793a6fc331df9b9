#ifndef DENSECAM_H
#define DENSECAM_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Zero is success.
 */
typedef enum DcStatus {
  DC_STATUS_OK = 0,
  DC_STATUS_NULL_POINTER = 1,
  DC_STATUS_INVALID_ARGUMENT = 2,
  DC_STATUS_SHAPE = 3,
  DC_STATUS_IO = 4,
  DC_STATUS_CHECKPOINT = 5,
  DC_STATUS_NUMERIC = 6,
  DC_STATUS_UNDEFINED_METRIC = 7,
  DC_STATUS_PANIC = 8,
} DcStatus;

/**
 * Opaque model handle.
 */
typedef struct DcModel DcModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *dc_last_error(void);

/**
 * Builds a freshly initialized desk-size model (64×64 grayscale input)
 * with `num_classes` outputs.
 */
enum DcStatus dc_model_build(size_t num_classes, uint64_t seed, struct DcModel **out);

/**
 * Loads a checkpoint file.
 */
enum DcStatus dc_model_load(const char *path, struct DcModel **out);

enum DcStatus dc_model_save(const struct DcModel *model, const char *path);

/**
 * Releases a handle. Null is ignored.
 */
void dc_model_free(struct DcModel *model);

/**
 * Writes the number of outputs, input channels and input side length.
 */
enum DcStatus dc_model_shape(const struct DcModel *model,
                             size_t *num_classes,
                             size_t *channels,
                             size_t *image_size);

/**
 * Eval-mode probabilities for `n` images into `out` (`n × num_classes`).
 */
enum DcStatus dc_model_predict(const struct DcModel *model,
                               const double *images,
                               size_t images_len,
                               size_t n,
                               double *out,
                               size_t out_len);

/**
 * Class activation map of `class_index` for one image, upscaled to the
 * input size, into `out` (`image_size²` values, row-major).
 */
enum DcStatus dc_model_cam(const struct DcModel *model,
                           const double *image,
                           size_t image_len,
                           size_t class_index,
                           double *out,
                           size_t out_len);

/**
 * Area under the ROC curve; `labels` are 0 or nonzero.
 */
enum DcStatus dc_auroc(const double *scores, const uint8_t *labels, size_t n, double *out);

/**
 * F1 of `pred` against `truth`. `degenerate` (may be null) is set to 1
 * when neither vector has a positive and the score is 1 by convention.
 */
enum DcStatus dc_f1(const uint8_t *pred,
                    const uint8_t *truth,
                    size_t n,
                    double *out,
                    uint8_t *degenerate);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DENSECAM_H */
