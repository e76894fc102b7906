#ifndef VIVI_H
#define VIVI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

/*
 Result code of every fallible call.
 */
typedef enum ViviStatus {
  VIVI_STATUS_OK = 0,
  VIVI_STATUS_NULL_POINTER = 1,
  VIVI_STATUS_INVALID_ARGUMENT = 2,
  VIVI_STATUS_CONFIG = 3,
  VIVI_STATUS_IO = 4,
  VIVI_STATUS_FORMAT = 5,
  VIVI_STATUS_NUMERIC = 6,
  VIVI_STATUS_BUFFER_TOO_SMALL = 7,
  VIVI_STATUS_PANIC = 8,
} ViviStatus;

/*
 Resolved experiment configuration.
 */
typedef struct ViviConfig ViviConfig;

/*
 A trained model (encoder and heads) in f32.
 */
typedef struct ViviModel ViviModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or NULL. The pointer stays
 valid until the next call into this library on the same thread.
 */
const char *vivi_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *vivi_version(void);

/*
 Releases a string returned by this library. NULL is ignored.

 # Safety
 `s` must come from this library and not have been freed.
 */
void vivi_string_free(char *s);

/*
 Loads a configuration: defaults, then the TOML file at `path` (may be
 NULL), then `n_overrides` strings of the form `dotted.key=value`.

 # Safety
 `path` is NULL or a NUL-terminated string; `overrides` points to
 `n_overrides` NUL-terminated strings; `out` is writable.
 */
enum ViviStatus vivi_config_load(const char *path,
                                 const char *const *overrides,
                                 size_t n_overrides,
                                 struct ViviConfig **out);

/*
 # Safety
 `cfg` is NULL or a handle from [`vivi_config_load`] not yet freed.
 */
void vivi_config_free(struct ViviConfig *cfg);

/*
 The resolved configuration as TOML; free with [`vivi_string_free`].

 # Safety
 `cfg` is a live config handle; `out` is writable.
 */
enum ViviStatus vivi_config_to_toml(const struct ViviConfig *cfg, char **out);

/*
 Trains a model as configured (generated corpus or configured shards).

 # Safety
 `cfg` is a live config handle; `out` is writable.
 */
enum ViviStatus vivi_train(const struct ViviConfig *cfg, struct ViviModel **out);

/*
 Loads a model from a checkpoint file.

 # Safety
 `path` is a NUL-terminated string; `out` is writable.
 */
enum ViviStatus vivi_model_load(const char *path, struct ViviModel **out);

/*
 Writes the model parameters (without optimizer state) to `path`.

 # Safety
 `model` is a live model handle; `path` is a NUL-terminated string.
 */
enum ViviStatus vivi_model_save(const struct ViviModel *model, const char *path);

/*
 # Safety
 `model` is NULL or a model handle not yet freed.
 */
void vivi_model_free(struct ViviModel *model);

/*
 Embedding width D; 0 for NULL.

 # Safety
 `model` is NULL or a live model handle.
 */
size_t vivi_model_embed_dim(const struct ViviModel *model);

/*
 Expected frame side length in pixels; 0 for NULL.

 # Safety
 `model` is NULL or a live model handle.
 */
size_t vivi_model_input_size(const struct ViviModel *model);

/*
 Expected channel count; 0 for NULL.

 # Safety
 `model` is NULL or a live model handle.
 */
size_t vivi_model_input_channels(const struct ViviModel *model);

/*
 Encodes `count` HWC frames with values in [0, 1] into `count * D`
 embeddings (row-major). `out_len` must be at least `count * D`.

 # Safety
 `frames` holds `count * size * size * channels` floats; `out` holds
 `out_len` floats.
 */
enum ViviStatus vivi_model_encode(const struct ViviModel *model,
                                  const float *frames,
                                  size_t count,
                                  float *out,
                                  size_t out_len);

/*
 Detects shot boundaries in `n_frames` 8-bit frames of `frame_len` bytes.
 Boundary indices (first frame of each new shot) go to `out`; `written`
 receives the number found. If `capacity` is too small, nothing is copied,
 `written` receives the required size and `BufferTooSmall` is returned.

 # Safety
 `frames` holds `n_frames * frame_len` bytes; `out` holds `capacity`
 entries; `written` is writable.
 */
enum ViviStatus vivi_detect_shots(const uint8_t *frames,
                                  size_t n_frames,
                                  size_t frame_len,
                                  size_t channels,
                                  double threshold,
                                  size_t *out,
                                  size_t capacity,
                                  size_t *written);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VIVI_H */
