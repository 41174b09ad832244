#ifndef SELFSYNTH_H
#define SELFSYNTH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result code of every fallible call.
 */
typedef enum SsStatus {
  SS_STATUS_OK = 0,
  SS_STATUS_NULL_POINTER = 1,
  SS_STATUS_INVALID_UTF8 = 2,
  SS_STATUS_BUFFER_TOO_SMALL = 3,
  SS_STATUS_CONFIG = 4,
  SS_STATUS_SHAPE = 5,
  SS_STATUS_LENGTH = 6,
  SS_STATUS_UNKNOWN_TOKEN = 7,
  SS_STATUS_CONTRACT = 8,
  SS_STATUS_CORRUPT = 9,
  SS_STATUS_PARSE = 10,
  SS_STATUS_IO = 11,
  SS_STATUS_MISSING = 12,
  SS_STATUS_OTHER = 13,
  SS_STATUS_PANIC = 14,
} SsStatus;

/*
 Opaque model parameters.
 */
typedef struct SsModel SsModel;

/*
 Opaque trained tokenizer.
 */
typedef struct SsTokenizer SsTokenizer;

/*
 Message of the last failure on this thread, or NULL. The pointer stays
 valid until the next failing call on the same thread.
 */
const char *ss_last_error(void);

/*
 Loads a `bpe-v1` vocabulary file.

 # Safety
 `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum SsStatus ss_tokenizer_load(const char *path, struct SsTokenizer **out);

/*
 Trains a tokenizer on `n_texts` NUL-terminated strings.

 # Safety
 `texts` must point to `n_texts` valid string pointers; `out` must be
 writable.
 */
enum SsStatus ss_tokenizer_train(const char *const *texts,
                                 size_t n_texts,
                                 size_t vocab_size,
                                 struct SsTokenizer **out);

/*
 # Safety
 `tok` must be a tokenizer handle or NULL; `path` a NUL-terminated string.
 */
enum SsStatus ss_tokenizer_save(const struct SsTokenizer *tok, const char *path);

/*
 Vocabulary size, or 0 for a NULL handle.

 # Safety
 `tok` must be a tokenizer handle or NULL.
 */
size_t ss_tokenizer_vocab_size(const struct SsTokenizer *tok);

/*
 Encodes UTF-8 `text` into `ids` (capacity `cap`).

 # Safety
 `ids` must hold `cap` writable elements; other pointers must be valid.
 */
enum SsStatus ss_tokenizer_encode(const struct SsTokenizer *tok,
                                  const char *text,
                                  uint32_t *ids,
                                  size_t cap,
                                  size_t *out_len);

/*
 Decodes `ids` into a NUL-terminated string in `buf`. Special tokens are
 dropped; bytes that are not valid UTF-8 are replaced.

 # Safety
 `ids` must hold `n` elements and `buf` `cap` writable bytes.
 */
enum SsStatus ss_tokenizer_decode(const struct SsTokenizer *tok,
                                  const uint32_t *ids,
                                  size_t n,
                                  char *buf,
                                  size_t cap,
                                  size_t *out_len);

/*
 # Safety
 `tok` must come from this library and not be used afterwards.
 */
void ss_tokenizer_free(struct SsTokenizer *tok);

/*
 Loads parameters from an `ssckpt-v1` checkpoint, verifying its digest.

 # Safety
 `path` must be a NUL-terminated string and `out` writable.
 */
enum SsStatus ss_model_load(const char *path, struct SsModel **out);

/*
 Hex SHA-256 digest of all parameters (64 characters plus NUL).

 # Safety
 `buf` must hold `cap` writable bytes.
 */
enum SsStatus ss_model_digest(const struct SsModel *model, char *buf, size_t cap, size_t *out_len);

/*
 Vocabulary size of the model, or 0 for a NULL handle.

 # Safety
 `model` must be a model handle or NULL.
 */
size_t ss_model_vocab_size(const struct SsModel *model);

/*
 Summed log-probability of `ids` after BOS, optionally conditioned on the
 PPM image at `image_path` (NULL for text only).

 # Safety
 `ids` must hold `n` elements; `image_path` is NULL or NUL-terminated;
 `out` must be writable.
 */
enum SsStatus ss_model_log_prob(const struct SsModel *model,
                                const uint32_t *ids,
                                size_t n,
                                const char *image_path,
                                double *out);

/*
 Temperature, top-k and nucleus filtering of `n` logits into `probs`.

 # Safety
 `logits` and `probs` must each hold `n` elements.
 */
enum SsStatus ss_filter_logits(const double *logits,
                               size_t n,
                               double temperature,
                               size_t top_k,
                               double top_p,
                               double *probs);

/*
 Samples a caption for the PPM image at `image_path` with the default
 sampler settings and writes it NUL-terminated into `buf`.

 # Safety
 Handles must be valid; `buf` must hold `cap` writable bytes.
 */
enum SsStatus ss_model_caption(const struct SsModel *model,
                               const struct SsTokenizer *tok,
                               const char *image_path,
                               uint64_t seed,
                               char *buf,
                               size_t cap,
                               size_t *out_len);

/*
 # Safety
 `model` must come from this library and not be used afterwards.
 */
void ss_model_free(struct SsModel *model);

#endif  /* SELFSYNTH_H */
