#ifndef MALIMG_FORGE_H
#define MALIMG_FORGE_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum MfStatus {
  MF_STATUS_OK = 0,
  MF_STATUS_NULL_POINTER = 1,
  MF_STATUS_INVALID_ARGUMENT = 2,
  MF_STATUS_CONFIG = 3,
  MF_STATUS_IO = 4,
  MF_STATUS_RUNTIME = 5,
  MF_STATUS_PANIC = 6,
} MfStatus;

// Trained extreme learning machine.
typedef struct MfElm MfElm;

// AC-GAN generator and discriminator.
typedef struct MfGan MfGan;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next call into this library from the same thread.
const char *mf_last_error(void);

// Library version as a static NUL-terminated string.
const char *mf_version(void);

// Lays the first `n*n` bytes of `data` out row by row into `out_pixels`
// (`n*n` bytes). Fails with `MF_STATUS_INVALID_ARGUMENT` when `len < n*n`.
//
// # Safety
// `data` must be valid for `len` reads and `out_pixels` for `n*n` writes.
enum MfStatus mf_bytes_to_image(const uint8_t *data, size_t len, size_t n, uint8_t *out_pixels);

// Zero-mean scaling of an `n*n` image into `[-1, 1]`; constant images map
// to zeros.
//
// # Safety
// `pixels` must be valid for `n*n` reads and `out` for `n*n` writes.
enum MfStatus mf_scale_pixels(const uint8_t *pixels, size_t n, double *out);

// Trains an ELM on `samples×dim` features with labels in `[0, num_classes)`.
//
// # Safety
// `features` must be valid for `samples*dim` reads, `labels` for `samples`
// reads and `out` for one pointer write.
enum MfStatus mf_elm_train(const double *features,
                           size_t samples,
                           size_t dim,
                           const uint32_t *labels,
                           size_t num_classes,
                           size_t hidden_units,
                           uint64_t seed,
                           struct MfElm **out);

// Predicted class of each of `samples` rows.
//
// # Safety
// `elm` must come from this library; `features` must be valid for
// `samples*dim` reads and `out_labels` for `samples` writes.
enum MfStatus mf_elm_predict(const struct MfElm *elm,
                             const double *features,
                             size_t samples,
                             size_t dim,
                             uint32_t *out_labels);

// Input width the model expects (0 for a null handle).
//
// # Safety
// `elm` must be null or come from this library.
size_t mf_elm_input_dim(const struct MfElm *elm);

// # Safety
// `elm` must come from this library; `path` must be NUL-terminated.
enum MfStatus mf_elm_save(const struct MfElm *elm, const char *path);

// # Safety
// `path` must be NUL-terminated and `out` valid for one pointer write.
enum MfStatus mf_elm_load(const char *path, struct MfElm **out);

// # Safety
// `elm` must be null or come from this library and not be used afterwards.
void mf_elm_free(struct MfElm *elm);

// Freshly initialised AC-GAN; `width_divisor` in {1, 2, 4, 8, 16}.
//
// # Safety
// `out` must be valid for one pointer write.
enum MfStatus mf_gan_build(size_t image_size,
                           size_t num_classes,
                           size_t width_divisor,
                           uint64_t seed,
                           struct MfGan **out);

// Loads a checkpoint written by the training pipeline.
//
// # Safety
// `path` must be NUL-terminated and `out` valid for one pointer write.
enum MfStatus mf_gan_load(const char *path, struct MfGan **out);

// Image side length `n` (0 for a null handle).
//
// # Safety
// `gan` must be null or come from this library.
size_t mf_gan_image_size(const struct MfGan *gan);

// # Safety
// `gan` must be null or come from this library.
size_t mf_gan_num_classes(const struct MfGan *gan);

// # Safety
// `gan` must be null or come from this library.
size_t mf_gan_latent_dim(const struct MfGan *gan);

// Generates `batch` images from `batch×latent_dim` noise and one label per
// image; writes `batch×n×n` values in `[-1, 1]` to `out_images`.
//
// # Safety
// `gan` must come from this library and every buffer must be sized as
// described.
enum MfStatus mf_gan_generate(const struct MfGan *gan,
                              const double *noise,
                              const uint32_t *labels,
                              size_t batch,
                              double *out_images);

// # Safety
// `gan` must be null or come from this library and not be used afterwards.
void mf_gan_free(struct MfGan *gan);

// Condenses a `2K×2K` confusion matrix whose classes are the `K` real
// families followed by the matching fake classes in the same order. Writes
// 8 counts: row real then row fake, columns real-same, fake-same,
// real-other, fake-other.
//
// # Safety
// `counts` must be valid for `(2K)²` reads and `out` for 8 writes.
enum MfStatus mf_condense(const uint64_t *counts, size_t num_families, uint64_t *out);

// Fraction of samples whose realness is predicted correctly, for the same
// matrix layout as [`mf_condense`].
//
// # Safety
// `counts` must be valid for `(2K)²` reads and `out` for one write.
enum MfStatus mf_real_fake_accuracy(const uint64_t *counts, size_t num_families, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MALIMG_FORGE_H */
