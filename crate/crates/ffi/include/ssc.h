#ifndef SSC_H
#define SSC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Outcome of an API call.
typedef enum {
  SSC_STATUS_OK = 0,
  // Null or malformed argument, or an invalid configuration.
  SSC_STATUS_USAGE = 1,
  // Bad data, checkpoint or file access.
  SSC_STATUS_INPUT = 2,
  // Numeric domain failure or diverged training.
  SSC_STATUS_NUMERIC = 3,
  // A panic was caught at the boundary. This is a library bug.
  SSC_STATUS_INTERNAL = 4,
} SscStatus;

// Model and training configuration.
typedef struct SscConfig SscConfig;

// Confusion counts from an evaluation.
typedef struct SscConfusion SscConfusion;

// Scene samples with their label space.
typedef struct SscDataset SscDataset;

typedef struct SscModel SscModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *ssc_version(void);

// Message of the last failed call on this thread, or null. The pointer
// stays valid until the next failing call on the same thread.
const char *ssc_last_error(void);

// Default configuration.
//
// # Safety
// `out` must be null or valid for writes.
SscStatus ssc_config_default(SscConfig **out);

// Parses `key = value` lines over the defaults.
//
// # Safety
// `config_text` must be null or a NUL-terminated string; `out` null or writable.
SscStatus ssc_config_parse(const char *config_text, SscConfig **out);

// Sets one key. The configuration is unchanged when the result would be
// invalid.
//
// # Safety
// `config` must be null or a live handle; `key` and `value` null or
// NUL-terminated strings.
SscStatus ssc_config_set(SscConfig *config, const char *key, const char *value);

// Writes the configuration as text into `buf` (NUL-terminated, truncated
// to `cap` bytes) and its full length without the NUL into `needed`.
// Pass a null `buf` to query the length.
//
// # Safety
// `buf` must be null or valid for `cap` bytes; `needed` null or writable.
SscStatus ssc_config_to_text(const SscConfig *config, char *buf, size_t cap, size_t *needed);

// # Safety
// `config` must be null or a handle not yet freed.
void ssc_config_free(SscConfig *config);

// Reads a dataset directory as written by `ssc gen`.
//
// # Safety
// `path` must be null or NUL-terminated; `out` null or writable.
SscStatus ssc_dataset_read(const char *path, SscDataset **out);

// Generates `count` synthetic scenes from the grid, image size and seed
// of `config`.
//
// # Safety
// `config` must be null or a live handle; `out` null or writable.
SscStatus ssc_dataset_generate(const SscConfig *config, size_t count, SscDataset **out);

// # Safety
// `dataset` must be null or a live handle; `len` null or writable.
SscStatus ssc_dataset_len(const SscDataset *dataset, size_t *len);

// # Safety
// `dataset` must be null or a live handle; `out` null or writable.
SscStatus ssc_dataset_num_classes(const SscDataset *dataset, size_t *out);

// Voxel count of sample `index`, the buffer length the label calls expect.
//
// # Safety
// `dataset` must be null or a live handle; `out` null or writable.
SscStatus ssc_dataset_num_voxels(const SscDataset *dataset, size_t index, size_t *out);

// Copies the ground-truth labels of sample `index`. Voxels outside the
// valid mask read as 255 and are ignored by evaluation.
//
// # Safety
// `labels` must be null or valid for `len` writes.
SscStatus ssc_dataset_ground_truth(const SscDataset *dataset,
                                   size_t index,
                                   uint16_t *labels,
                                   size_t len);

// # Safety
// `dataset` must be null or a handle not yet freed.
void ssc_dataset_free(SscDataset *dataset);

// Freshly initialized model. The variant named in the config is applied.
//
// # Safety
// `config` must be null or a live handle; `out` null or writable.
SscStatus ssc_model_new(const SscConfig *config, size_t num_classes, SscModel **out);

// # Safety
// `path` must be null or NUL-terminated; `out` null or writable.
SscStatus ssc_model_load(const char *path, SscModel **out);

// # Safety
// `model` must be null or a live handle; `path` null or NUL-terminated.
SscStatus ssc_model_save(const SscModel *model, const char *path);

// Trains in place with the model's own config. `steps` may be null.
// On failure the weights hold the state reached before the error.
//
// # Safety
// `model` and `dataset` must be null or live handles.
SscStatus ssc_model_train(SscModel *model, const SscDataset *dataset, size_t *steps);

// Predicted labels of sample `index` into `labels[0..len]`.
//
// # Safety
// `labels` must be null or valid for `len` writes.
SscStatus ssc_model_predict(const SscModel *model,
                            const SscDataset *dataset,
                            size_t index,
                            uint16_t *labels,
                            size_t len);

// Scores the model on every sample with `workers` threads.
//
// # Safety
// `model` and `dataset` must be null or live handles; `out` null or writable.
SscStatus ssc_model_evaluate(const SscModel *model,
                             const SscDataset *dataset,
                             size_t workers,
                             SscConfusion **out);

// # Safety
// `model` must be null or a handle not yet freed.
void ssc_model_free(SscModel *model);

// # Safety
// `cm` must be null or a live handle; `out` null or writable.
SscStatus ssc_confusion_scene_iou(const SscConfusion *cm, double *out);

// Mean IoU over the non-empty classes present in prediction or ground truth.
//
// # Safety
// `cm` must be null or a live handle; `out` null or writable.
SscStatus ssc_confusion_miou(const SscConfusion *cm, double *out);

// Number of valid voxels with ground truth `gt` predicted as `pred`.
//
// # Safety
// `cm` must be null or a live handle; `out` null or writable.
SscStatus ssc_confusion_count(const SscConfusion *cm, size_t gt, size_t pred, uint64_t *out);

// # Safety
// `cm` must be null or a handle not yet freed.
void ssc_confusion_free(SscConfusion *cm);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SSC_H */
