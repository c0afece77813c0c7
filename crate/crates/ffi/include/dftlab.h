#ifndef DFTLAB_H
#define DFTLAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define DFT_LOSS_SFT 0

#define DFT_LOSS_DFT_TOKEN 1

#define DFT_LOSS_DFT_SEQUENCE 2

#define DFT_LOSS_FOCAL 3

#define DFT_LOSS_IW_SFT 4

#define DFT_TASK_ADDITION 0

#define DFT_TASK_REVERSAL 1

#define DFT_TASK_MODULAR 2

typedef enum DftStatus {
  DFT_STATUS_OK = 0,
  /**
   * Null pointer, bad enum value or undersized buffer.
   */
  DFT_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Rejected input or configuration.
   */
  DFT_STATUS_INVALID = 2,
  /**
   * Failure while computing.
   */
  DFT_STATUS_RUNTIME = 3,
  DFT_STATUS_PANIC = 4,
} DftStatus;

/**
 * Opaque model handle.
 */
typedef struct DftModel DftModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into the library from this thread.
 */
const char *dft_last_error(void);

/**
 * Freshly initialized model.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum DftStatus dft_model_new(size_t vocab_size,
                             size_t d_model,
                             size_t n_layers,
                             size_t n_heads,
                             size_t context_length,
                             uint64_t seed,
                             struct DftModel **out);

/**
 * Loads a checkpoint written by the lab.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` valid for writes.
 */
enum DftStatus dft_model_load(const char *path, struct DftModel **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `model` a live handle.
 */
enum DftStatus dft_model_save(const struct DftModel *model, const char *path);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void dft_model_free(struct DftModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` valid for writes.
 */
enum DftStatus dft_model_vocab_size(const struct DftModel *model, size_t *out);

/**
 * Teacher-forced `log p(response_t | prompt, response_<t)`; writes
 * `response_len` values to `out`.
 *
 * # Safety
 * Pointers must be valid for the given lengths.
 */
enum DftStatus dft_token_log_probs(const struct DftModel *model,
                                   const size_t *prompt,
                                   size_t prompt_len,
                                   const size_t *response,
                                   size_t response_len,
                                   double *out);

/**
 * Samples up to `max_new` tokens (temperature 0 is greedy), stopping after
 * EOS. Writes at most `out_capacity` ids and the count to `out_len`.
 *
 * # Safety
 * Pointers must be valid for the given lengths.
 */
enum DftStatus dft_sample(const struct DftModel *model,
                          const size_t *prompt,
                          size_t prompt_len,
                          size_t max_new,
                          double temperature,
                          uint64_t seed,
                          size_t *out,
                          size_t out_capacity,
                          size_t *out_len);

/**
 * Loss (`DFT_LOSS_*`) over one sequence of token log-probabilities and its gradient with
 * respect to them. `mask[t] != 0` marks tokens that count; `reference` is
 * read only for IW_SFT and may be null otherwise. `gamma` applies to FOCAL,
 * `iw_clip` to IW_SFT. `sum_reduction != 0` sums over tokens instead of
 * averaging.
 *
 * # Safety
 * Array pointers must be valid for `len` elements.
 */
enum DftStatus dft_loss(int32_t kind,
                        double gamma,
                        double iw_clip,
                        int32_t sum_reduction,
                        const double *log_probs,
                        const uint8_t *mask,
                        const double *reference,
                        size_t len,
                        double *value,
                        double *grad);

/**
 * Checks a completion for task `DFT_TASK_*` against the task's recomputed answer; writes 1 or 0.
 *
 * # Safety
 * Strings must be NUL-terminated; `out` valid for writes.
 */
enum DftStatus dft_verify(int32_t task, const char *prompt, const char *completion, int32_t *out);

/**
 * Learning rate of update `step` (1-based) under linear warm-up followed by
 * cosine decay (`cosine != 0`) or a constant rate.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum DftStatus dft_lr_at(double peak,
                         double warmup_ratio,
                         size_t total_steps,
                         size_t step,
                         int32_t cosine,
                         double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DFTLAB_H */
