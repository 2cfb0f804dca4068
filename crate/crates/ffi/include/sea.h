#ifndef SEA_H
#define SEA_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SeaHead {
  SEA_HEAD_ACTION = 0,
  SEA_HEAD_OBJECT = 1,
} SeaHead;

typedef enum SeaMetric {
  SEA_METRIC_KLD = 0,
  SEA_METRIC_SIM = 1,
  SEA_METRIC_NSS = 2,
} SeaMetric;

typedef enum SeaStatus {
  SEA_STATUS_OK = 0,
  SEA_STATUS_NULL_POINTER = 1,
  SEA_STATUS_INVALID_ARGUMENT = 2,
  SEA_STATUS_IO = 3,
  SEA_STATUS_CONFIG = 4,
  SEA_STATUS_CHECKPOINT = 5,
  SEA_STATUS_SHAPE = 6,
  SEA_STATUS_TEMPLATE = 7,
  SEA_STATUS_METRIC = 8,
  SEA_STATUS_RUNTIME = 9,
  SEA_STATUS_PANIC = 10,
} SeaStatus;

/*
 A loaded model. Create with [`sea_model_load`], release with [`sea_model_free`].
 */
typedef struct SeaModel SeaModel;

/*
 One prediction. Strings it hands out stay valid until [`sea_prediction_free`].
 */
typedef struct SeaPrediction SeaPrediction;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread; empty after a success.
 Owned by the library and valid until the next call on the same thread.
 */
const char *sea_last_error(void);

/*
 Loads a checkpoint (the `.ckpt` blob with its `.json` sidecar).

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SeaStatus sea_model_load(const char *path, struct SeaModel **out);

/*
 Releases a model. Null is ignored.

 # Safety
 `model` must come from [`sea_model_load`] and not be used afterwards.
 */
void sea_model_free(struct SeaModel *model);

/*
 Vocabulary sizes of the model's two heads.

 # Safety
 All pointers must be valid.
 */
enum SeaStatus sea_model_vocab_sizes(const struct SeaModel *model,
                                     size_t *n_actions,
                                     size_t *n_objects);

/*
 Ego-only prediction on an interleaved 8-bit RGB buffer of
 `width * height * 3` bytes, rows top to bottom.

 # Safety
 `rgb` must point to that many readable bytes; `out` must be valid.
 */
enum SeaStatus sea_predict(const struct SeaModel *model,
                           const uint8_t *rgb,
                           uint32_t width,
                           uint32_t height,
                           struct SeaPrediction **out);

/*
 Releases a prediction. Null is ignored.

 # Safety
 `pred` must come from [`sea_predict`] and not be used afterwards.
 */
void sea_prediction_free(struct SeaPrediction *pred);

/*
 The caption, e.g. "I will push circle". Owned by `pred`.

 # Safety
 `pred` and `out` must be valid.
 */
enum SeaStatus sea_prediction_caption(const struct SeaPrediction *pred, const char **out);

/*
 Heatmap dimensions; the map has the input image's size.

 # Safety
 All pointers must be valid.
 */
enum SeaStatus sea_prediction_heatmap_size(const struct SeaPrediction *pred,
                                           uint32_t *width,
                                           uint32_t *height);

/*
 Copies the row-major heatmap (values in [0, 1]) into `buf`, which must
 hold exactly width × height doubles.

 # Safety
 `buf` must point to `len` writable doubles.
 */
enum SeaStatus sea_prediction_heatmap(const struct SeaPrediction *pred, double *buf, size_t len);

/*
 Label and probability at `rank` (0 = most likely) of one head. The label
 is owned by `pred`.

 # Safety
 All pointers must be valid.
 */
enum SeaStatus sea_prediction_ranked(const struct SeaPrediction *pred,
                                     enum SeaHead head,
                                     size_t rank,
                                     const char **label,
                                     double *prob);

/*
 Scores a predicted map against ground truth. The prediction is resized
 to the ground-truth shape first. `eps` is used by KLD only.

 # Safety
 `pred` and `gt` must point to row-major arrays of the given shapes.
 */
enum SeaStatus sea_metric(enum SeaMetric metric,
                          const double *pred,
                          uint32_t pred_width,
                          uint32_t pred_height,
                          const double *gt,
                          uint32_t gt_width,
                          uint32_t gt_height,
                          double eps,
                          double *out);

/*
 Fills `template`'s `[action]` and `[object]` placeholders. The result
 must be released with [`sea_string_free`].

 # Safety
 Inputs must be NUL-terminated strings and `out` a valid pointer.
 */
enum SeaStatus sea_render_caption(const char *action,
                                  const char *object,
                                  const char *template_,
                                  char **out);

/*
 Releases a string returned by this library. Null is ignored.

 # Safety
 `s` must come from a function documented to return an owned string.
 */
void sea_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEA_H */
