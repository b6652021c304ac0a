#ifndef TSDF_H
#define TSDF_H

/* Generated by cbindgen from tsdf-capi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status code returned by every fallible function.
typedef enum tsdf_status {
  // Success.
  TSDF_OK = 0,
  // A pointer was null or an argument was out of range.
  TSDF_ERR_ARGUMENT = 1,
  // A file or its contents could not be used (missing, corrupt,
  // wrong kind, shape mismatch).
  TSDF_ERR_DATA = 2,
  // A numerical failure (non-finite value) inside the model.
  TSDF_ERR_NUMERIC = 3,
  // An internal invariant failed; the message has details.
  TSDF_ERR_INTERNAL = 4,
} tsdf_status;

// Trained sequence aggregator loaded from a checkpoint.
typedef struct tsdf_aggregator tsdf_aggregator;

// Pretrained image encoder loaded from a checkpoint.
typedef struct tsdf_encoder tsdf_encoder;

// Read-only embedding cache loaded from disk.
typedef struct tsdf_store tsdf_store;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the most recent failure on this thread, empty if
// none. The pointer stays valid until the next failing call on the same
// thread; copy it if you need to keep it.
const char *tsdf_last_error_message(void);

// Version of the library as a static NUL-terminated string.
const char *tsdf_version(void);

// Load an encoder checkpoint from `path` into `*out`.
//
// # Safety
// `path` must be NUL-terminated; `out` must be a valid destination.
enum tsdf_status tsdf_encoder_load(const char *path, struct tsdf_encoder **out);

// Release an encoder handle. Passing null is a no-op.
//
// # Safety
// `enc` must be null or a pointer returned by [`tsdf_encoder_load`] that
// has not been freed yet.
void tsdf_encoder_free(struct tsdf_encoder *enc);

// Dimension of the embeddings this encoder produces.
//
// # Safety
// `enc` must be a live encoder handle; `out` must be a valid destination.
enum tsdf_status tsdf_encoder_dim(const struct tsdf_encoder *enc, size_t *out);

// Side length of the square input the encoder was trained on. Images of
// other sizes are accepted by [`tsdf_encoder_embed`] and resized.
//
// # Safety
// `enc` must be a live encoder handle; `out` must be a valid destination.
enum tsdf_status tsdf_encoder_image_size(const struct tsdf_encoder *enc, size_t *out);

// Embed one grayscale image.
//
// `pixels` is row-major, `height * width` values in [0, 1]. The image is
// resized to the encoder's input side, normalized, and embedded; the
// embedding is written to `out`, which must hold [`tsdf_encoder_dim`]
// floats (`out_len` says how many it holds).
//
// # Safety
// `enc` must be a live encoder handle; `pixels` must point to
// `height * width` floats; `out` must point to `out_len` writable floats.
enum tsdf_status tsdf_encoder_embed(const struct tsdf_encoder *enc,
                                    const float *pixels,
                                    size_t height,
                                    size_t width,
                                    float *out,
                                    size_t out_len);

// Load an aggregator checkpoint from `path` into `*out`.
//
// # Safety
// `path` must be NUL-terminated; `out` must be a valid destination.
enum tsdf_status tsdf_aggregator_load(const char *path, struct tsdf_aggregator **out);

// Release an aggregator handle. Passing null is a no-op.
//
// # Safety
// `agg` must be null or a pointer returned by [`tsdf_aggregator_load`]
// that has not been freed yet.
void tsdf_aggregator_free(struct tsdf_aggregator *agg);

// Per-frame embedding dimension the aggregator expects.
//
// # Safety
// `agg` must be a live aggregator handle; `out` must be a valid
// destination.
enum tsdf_status tsdf_aggregator_dim(const struct tsdf_aggregator *agg, size_t *out);

// Score one visit sequence.
//
// `frames` is row-major, `n_frames * dim` floats: one embedding per visit
// in acquisition order, `dim` matching [`tsdf_aggregator_dim`]. On
// success `*class_out` is the predicted class index and `*prob_out` the
// probability of class 1 (progression).
//
// # Safety
// `agg` must be a live aggregator handle; `frames` must point to
// `n_frames * dim` floats; `class_out` and `prob_out` must be valid
// destinations.
enum tsdf_status tsdf_aggregator_predict(const struct tsdf_aggregator *agg,
                                         const float *frames,
                                         size_t n_frames,
                                         size_t dim,
                                         uint32_t *class_out,
                                         double *prob_out);

// Load an embedding store from `path` into `*out`.
//
// # Safety
// `path` must be NUL-terminated; `out` must be a valid destination.
enum tsdf_status tsdf_store_open(const char *path, struct tsdf_store **out);

// Release a store handle. Passing null is a no-op.
//
// # Safety
// `store` must be null or a pointer returned by [`tsdf_store_open`] that
// has not been freed yet.
void tsdf_store_free(struct tsdf_store *store);

// Number of embeddings in the store.
//
// # Safety
// `store` must be a live store handle; `out` must be a valid destination.
enum tsdf_status tsdf_store_len(const struct tsdf_store *store, size_t *out);

// Dimension of each embedding in the store.
//
// # Safety
// `store` must be a live store handle; `out` must be a valid destination.
enum tsdf_status tsdf_store_dim(const struct tsdf_store *store, size_t *out);

// Copy the embedding stored under `id` into `out` (`out_len` floats of
// capacity; [`tsdf_store_dim`] are needed). Unknown ids are a data error.
//
// # Safety
// `store` must be a live store handle; `id` must be NUL-terminated; `out`
// must point to `out_len` writable floats.
enum tsdf_status tsdf_store_get(const struct tsdf_store *store,
                                const char *id,
                                float *out,
                                size_t out_len);

// Copy the id at `index` (in sorted order) into `buf` as a NUL-terminated
// string. `*len_out` receives the id's length in bytes excluding the NUL;
// if `buf_len` is too small the call fails with an argument error but
// still sets `*len_out`, so callers can size a retry.
//
// # Safety
// `store` must be a live store handle; `buf` must point to `buf_len`
// writable bytes; `len_out` must be a valid destination.
enum tsdf_status tsdf_store_id_at(const struct tsdf_store *store,
                                  size_t index,
                                  char *buf,
                                  size_t buf_len,
                                  size_t *len_out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* TSDF_H */
