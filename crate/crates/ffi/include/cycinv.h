#ifndef CYCINV_H
#define CYCINV_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result codes.
 */
typedef enum CycinvStatus {
  CYCINV_STATUS_OK = 0,
  CYCINV_STATUS_NULL_POINTER = 1,
  CYCINV_STATUS_INVALID_ARGUMENT = 2,
  CYCINV_STATUS_SHAPE = 3,
  CYCINV_STATUS_DOMAIN = 4,
  CYCINV_STATUS_INDEX = 5,
  CYCINV_STATUS_FORMAT = 6,
  CYCINV_STATUS_CONFIG = 7,
  CYCINV_STATUS_IO = 8,
  CYCINV_STATUS_PANIC = 9,
} CycinvStatus;

/*
 A loaded or generated dataset.
 */
typedef struct CycinvDataset CycinvDataset;

/*
 Trained encoder, decoder and discriminator.
 */
typedef struct CycinvModel CycinvModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *cycinv_version(void);

/*
 Length in bytes of the last error message on this thread, excluding NUL.
 */
uintptr_t cycinv_last_error_length(void);

/*
 Copies the last error message into `buf` (NUL-terminated, truncated to
 `len - 1` bytes). Returns the number of bytes written excluding NUL.

 # Safety
 `buf` must point to `len` writable bytes.
 */
uintptr_t cycinv_last_error_message(char *buf, uintptr_t len);

/*
 Generates `n` records of `classes` balanced shape classes.

 # Safety
 `out` must be a valid pointer to receive the handle.
 */
enum CycinvStatus cycinv_dataset_generate(uintptr_t n,
                                          uintptr_t classes,
                                          uintptr_t side,
                                          uint64_t seed,
                                          struct CycinvDataset **out);

/*
 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CycinvStatus cycinv_dataset_load(const char *path, struct CycinvDataset **out);

/*
 # Safety
 `ds` must be a live handle and `path` a NUL-terminated string.
 */
enum CycinvStatus cycinv_dataset_save(const struct CycinvDataset *ds, const char *path);

/*
 Record count, side length and class count.

 # Safety
 `ds` must be a live handle; null output pointers are skipped.
 */
enum CycinvStatus cycinv_dataset_info(const struct CycinvDataset *ds,
                                      uintptr_t *len,
                                      uintptr_t *side,
                                      uintptr_t *classes);

/*
 Copies record `index`: `side * side` pixels and its shape class.

 # Safety
 `pixels` must hold `pixels_len` floats; `label` may be null.
 */
enum CycinvStatus cycinv_dataset_record(const struct CycinvDataset *ds,
                                        uintptr_t index,
                                        float *pixels,
                                        uintptr_t pixels_len,
                                        uint32_t *label);

/*
 # Safety
 `ds` must be a handle from this library or null; it is invalid afterwards.
 */
void cycinv_dataset_free(struct CycinvDataset *ds);

/*
 Loads the networks from a training checkpoint.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CycinvStatus cycinv_model_load_checkpoint(const char *path, struct CycinvModel **out);

/*
 Loads the networks from a weights file.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CycinvStatus cycinv_model_load_weights(const char *path, struct CycinvModel **out);

/*
 Image side, latent width and class count.

 # Safety
 `m` must be a live handle; null output pointers are skipped.
 */
enum CycinvStatus cycinv_model_info(const struct CycinvModel *m,
                                    uintptr_t *side,
                                    uintptr_t *latent_dim,
                                    uintptr_t *classes);

/*
 Deterministic latent means of `n` images into `out` (`n * latent_dim`).

 # Safety
 `images` must hold `n * side * side` floats and `out` `out_len` floats.
 */
enum CycinvStatus cycinv_model_encode(const struct CycinvModel *m,
                                      const float *images,
                                      uintptr_t n,
                                      float *out,
                                      uintptr_t out_len);

/*
 Re-synthesizes `n` images with the given class codes (`n * side * side`
 outputs).

 # Safety
 `images` must hold `n * side * side` floats, `labels` `n` values and
 `out` `out_len` floats.
 */
enum CycinvStatus cycinv_model_generate(const struct CycinvModel *m,
                                        const float *images,
                                        const uint32_t *labels,
                                        uintptr_t n,
                                        float *out,
                                        uintptr_t out_len);

/*
 Decodes `n` standard-normal latents with class `label`.

 # Safety
 `out` must hold `out_len` floats.
 */
enum CycinvStatus cycinv_model_sample_prior(const struct CycinvModel *m,
                                            uint32_t label,
                                            uintptr_t n,
                                            uint64_t seed,
                                            float *out,
                                            uintptr_t out_len);

/*
 # Safety
 `m` must be a handle from this library or null; it is invalid afterwards.
 */
void cycinv_model_free(struct CycinvModel *m);

/*
 Runs the gradient-check and loss-oracle suite with `points` random points
 per check. Writes the number of failed checks to `failed`.

 # Safety
 `failed` must be a valid pointer.
 */
enum CycinvStatus cycinv_selfcheck(uintptr_t points, uintptr_t *failed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CYCINV_H */
