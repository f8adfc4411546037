#ifndef INNERLOOP_H
#define INNERLOOP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum IlStatus {
  IL_STATUS_OK = 0,
  IL_STATUS_NULL_ARGUMENT = 1,
  IL_STATUS_CONFIG = 2,
  IL_STATUS_IO = 3,
  IL_STATUS_FORMAT = 4,
  IL_STATUS_INPUT = 5,
  IL_STATUS_BUFFER_TOO_SMALL = 6,
  IL_STATUS_INTERNAL = 7,
} IlStatus;

typedef enum IlStrategy {
  IL_STRATEGY_NAIVE = 0,
  IL_STRATEGY_UNIFORM = 1,
  IL_STRATEGY_MOVING_AVERAGE = 2,
  IL_STRATEGY_AUTO_ALIGN = 3,
  IL_STRATEGY_NOISE = 4,
} IlStrategy;

/**
 * Model weights plus tokenizer.
 */
typedef struct IlModel IlModel;

/**
 * Loop range `[start, end)` run `repeats` times in total, plus the
 * boundary regularizer. `align_temperature <= 0` selects `sqrt(d_model)`.
 */
typedef struct IlLoopConfig {
  size_t start;
  size_t end;
  size_t repeats;
  enum IlStrategy strategy;
  float eta;
  float align_temperature;
  uint64_t noise_seed;
} IlLoopConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread. Valid until the next
 * failing call on the same thread; never null.
 */
const char *il_last_error_message(void);

/**
 * Loads a `.lprn` checkpoint. `tokenizer_path` may be null for the byte
 * tokenizer.
 *
 * # Safety
 * Paths must be null or valid NUL-terminated strings; `out` must be writable.
 */
enum IlStatus il_model_load(const char *model_path,
                            const char *tokenizer_path,
                            struct IlModel **out);

/**
 * Randomly initialised toy model with the byte tokenizer.
 *
 * # Safety
 * `out` must be writable.
 */
enum IlStatus il_model_init_random(size_t n_layers,
                                   size_t d_model,
                                   size_t vocab_size,
                                   uint64_t seed,
                                   struct IlModel **out);

/**
 * # Safety
 * `model` must be null or a handle from this library, freed at most once.
 */
void il_model_free(struct IlModel *model);

/**
 * Number of blocks; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t il_model_n_layers(const struct IlModel *model);

/**
 * # Safety
 * `model` must be null or a live handle.
 */
size_t il_model_vocab_size(const struct IlModel *model);

/**
 * # Safety
 * `model` must be null or a live handle.
 */
size_t il_model_d_model(const struct IlModel *model);

/**
 * Tokenizes `text` into `out_ids`; `*out_len` receives the token count
 * even when the buffer is too small.
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out_ids` must hold `cap` ids.
 */
enum IlStatus il_encode(const struct IlModel *model,
                        const char *text,
                        uint32_t *out_ids,
                        size_t cap,
                        size_t *out_len);

/**
 * Logits for the last token. `config` may be null for the plain forward.
 *
 * # Safety
 * `tokens` must hold `n_tokens` ids; `out_logits` must hold `cap` floats.
 */
enum IlStatus il_forward_last_logits(const struct IlModel *model,
                                     const uint32_t *tokens,
                                     size_t n_tokens,
                                     const struct IlLoopConfig *config,
                                     float *out_logits,
                                     size_t cap);

/**
 * Length-normalized log-likelihood of each choice. Choices are packed
 * back to back in `choice_tokens`, with lengths in `choice_lens`.
 *
 * # Safety
 * Arrays must hold the stated number of elements; `out_scores` must hold
 * `n_choices` doubles and `out_best` must be writable.
 */
enum IlStatus il_score_choices(const struct IlModel *model,
                               const uint32_t *context,
                               size_t n_context,
                               const uint32_t *choice_tokens,
                               const size_t *choice_lens,
                               size_t n_choices,
                               const struct IlLoopConfig *config,
                               double *out_scores,
                               size_t *out_best);

/**
 * Greedy decoding of up to `max_new` tokens, stopping before the
 * tokenizer's EOS.
 *
 * # Safety
 * `prompt` must hold `n_prompt` ids; `out_tokens` must hold `cap` ids.
 */
enum IlStatus il_generate(const struct IlModel *model,
                          const uint32_t *prompt,
                          size_t n_prompt,
                          const struct IlLoopConfig *config,
                          size_t max_new,
                          uint32_t *out_tokens,
                          size_t cap,
                          size_t *out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* INNERLOOP_H */
