#ifndef DANET_H
#define DANET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DanetMaskHead {
  DANET_MASK_HEAD_SIGMOID = 0,
  DANET_MASK_HEAD_SOFTMAX = 1,
} DanetMaskHead;

/**
 * Result code of every fallible call.
 */
typedef enum DanetStatus {
  DANET_STATUS_OK = 0,
  DANET_STATUS_NULL_POINTER = 1,
  DANET_STATUS_INVALID_ARGUMENT = 2,
  DANET_STATUS_IO = 3,
  DANET_STATUS_FORMAT = 4,
  DANET_STATUS_SHAPE = 5,
  DANET_STATUS_NUMERICAL = 6,
  DANET_STATUS_NO_CLUSTER_STRUCTURE = 7,
  DANET_STATUS_BUFFER_TOO_SMALL = 8,
  DANET_STATUS_PANIC = 99,
} DanetStatus;

typedef enum DanetStrategy {
  DANET_STRATEGY_KMEANS = 0,
  DANET_STRATEGY_FIXED = 1,
  DANET_STRATEGY_ORACLE = 2,
} DanetStrategy;

/**
 * Opaque attractor codebook.
 */
typedef struct DanetCodebook DanetCodebook;

/**
 * Opaque trained model.
 */
typedef struct DanetModel DanetModel;

/**
 * Opaque separation output.
 */
typedef struct DanetSeparation DanetSeparation;

/**
 * Architecture summary of a loaded model.
 */
typedef struct DanetModelInfo {
  uintptr_t n_layers;
  uintptr_t hidden;
  uintptr_t embed_dim;
  uintptr_t n_freq;
  uint32_t threshold_pct;
  enum DanetMaskHead head;
} DanetModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * Valid until the next call into this library on the same thread.
 */
const char *danet_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *danet_version(void);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DanetStatus danet_model_load(const char *path, struct DanetModel **out);

/**
 * # Safety
 * `model` must come from [`danet_model_load`] and not be freed yet; null is
 * ignored.
 */
void danet_model_free(struct DanetModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum DanetStatus danet_model_info(const struct DanetModel *model, struct DanetModelInfo *out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DanetStatus danet_codebook_load(const char *path, struct DanetCodebook **out);

/**
 * # Safety
 * `codebook` must come from [`danet_codebook_load`]; null is ignored.
 */
void danet_codebook_free(struct DanetCodebook *codebook);

/**
 * Separates a mono mixture of `len` samples into `n_sources` signals.
 *
 * `codebook` is required for [`DanetStrategy::Fixed`] and may otherwise be
 * null. `refs` is required for [`DanetStrategy::Oracle`]: an array of
 * `n_sources` pointers to `len` samples each.
 *
 * # Safety
 * All non-null pointers must be valid for the stated lengths; `out` must be
 * a valid pointer.
 */
enum DanetStatus danet_separate(const struct DanetModel *model,
                                const double *samples,
                                uintptr_t len,
                                uint32_t sample_rate,
                                uintptr_t n_sources,
                                enum DanetStrategy strategy,
                                const struct DanetCodebook *codebook,
                                const double *const *refs,
                                uint64_t seed,
                                struct DanetSeparation **out);

/**
 * # Safety
 * `sep` must come from [`danet_separate`]; null is ignored.
 */
void danet_separation_free(struct DanetSeparation *sep);

/**
 * Number of separated sources, 0 for a null handle.
 *
 * # Safety
 * `sep` must be a live handle or null.
 */
uintptr_t danet_separation_n_sources(const struct DanetSeparation *sep);

/**
 * Samples per separated source, 0 for a null handle.
 *
 * # Safety
 * `sep` must be a live handle or null.
 */
uintptr_t danet_separation_len(const struct DanetSeparation *sep);

/**
 * Embedding dimension of the attractors, 0 for a null handle.
 *
 * # Safety
 * `sep` must be a live handle or null.
 */
uintptr_t danet_separation_embed_dim(const struct DanetSeparation *sep);

/**
 * Copies source `index` into `buf`, which must hold
 * [`danet_separation_len`] values.
 *
 * # Safety
 * `buf` must be valid for `buf_len` writes.
 */
enum DanetStatus danet_separation_source(const struct DanetSeparation *sep,
                                         uintptr_t index,
                                         double *buf,
                                         uintptr_t buf_len);

/**
 * Copies the `n_sources x embed_dim` attractors, row-major, into `buf`.
 *
 * # Safety
 * `buf` must be valid for `buf_len` writes.
 */
enum DanetStatus danet_separation_attractors(const struct DanetSeparation *sep,
                                             double *buf,
                                             uintptr_t buf_len);

/**
 * Scale-invariant SNR of `estimate` against `reference`, in dB.
 *
 * # Safety
 * Both arrays must hold `len` values and `out_db` must be valid.
 */
enum DanetStatus danet_si_snr(const double *estimate,
                              const double *reference,
                              uintptr_t len,
                              double *out_db);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DANET_H */
