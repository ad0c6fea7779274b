#ifndef SMITH_H
#define SMITH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SmithStatus {
  SMITH_STATUS_OK = 0,
  SMITH_STATUS_NULL_POINTER = 1,
  SMITH_STATUS_INVALID_UTF8 = 2,
  SMITH_STATUS_IO = 3,
  SMITH_STATUS_CHECKPOINT = 4,
  SMITH_STATUS_INVALID_INPUT = 5,
  SMITH_STATUS_BUFFER_TOO_SMALL = 6,
  SMITH_STATUS_EMPTY_DOCUMENT = 7,
  SMITH_STATUS_NUMERIC = 8,
  SMITH_STATUS_PANIC = 9,
} SmithStatus;

/**
 * Loaded model together with its vocabulary.
 */
typedef struct SmithHandle SmithHandle;

/**
 * Attention score entries for flat and hierarchical encoding of `b`
 * documents of `n` tokens.
 */
typedef struct SmithAttentionBudget {
  uint64_t flat_entries;
  uint64_t sentence_level_entries;
  uint64_t document_level_entries;
  uint64_t hierarchical_total;
  uint64_t padding_entries;
  double reduction_factor;
} SmithAttentionBudget;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a checkpoint and vocabulary. On success `*out` owns a handle that
 * must be released with [`smith_model_free`].
 *
 * # Safety
 * Paths are NUL-terminated strings; `out` is writable.
 */
enum SmithStatus smith_model_load(const char *checkpoint_path,
                                  const char *vocab_path,
                                  struct SmithHandle **out);

/**
 * Releases a handle. Null is accepted and ignored.
 *
 * # Safety
 * `handle` is null or came from [`smith_model_load`] and was not freed.
 */
void smith_model_free(struct SmithHandle *handle);

/**
 * Length of the embeddings produced by the model.
 *
 * # Safety
 * `handle` as for [`smith_model_free`]; `out` is writable.
 */
enum SmithStatus smith_model_output_dim(const struct SmithHandle *handle, size_t *out);

/**
 * Embeds `text` into `out[0..capacity]`. `*written` receives the embedding
 * length, also when the buffer is too small.
 *
 * # Safety
 * `out` points to `capacity` writable doubles; `written` is writable.
 */
enum SmithStatus smith_embed_text(const struct SmithHandle *handle,
                                  const char *text,
                                  double *out,
                                  size_t capacity,
                                  size_t *written);

/**
 * Match probability of two texts under the model's calibrated cosine.
 *
 * # Safety
 * Texts are NUL-terminated strings; `out` is writable.
 */
enum SmithStatus smith_match_probability(const struct SmithHandle *handle,
                                         const char *text_a,
                                         const char *text_b,
                                         double *out);

/**
 * Cosine similarity of two vectors of length `len`.
 *
 * # Safety
 * `a` and `b` point to `len` readable doubles; `out` is writable.
 */
enum SmithStatus smith_cosine(const double *a, const double *b, size_t len, double *out);

/**
 * Closed-form attention budget for `b` documents of `n` tokens, blocks of
 * `ls` tokens, `a` heads and `l` layers per level.
 *
 * # Safety
 * `out` is writable.
 */
enum SmithStatus smith_attention_budget(uint64_t n,
                                        uint64_t ls,
                                        uint64_t b,
                                        uint64_t a,
                                        uint64_t l,
                                        struct SmithAttentionBudget *out);

/**
 * Copies the calling thread's last error message into `buf` as a
 * NUL-terminated string, truncating to `capacity - 1` bytes. Returns the
 * full message length without the terminator.
 *
 * # Safety
 * `buf` is null or points to `capacity` writable bytes.
 */
size_t smith_last_error_message(char *buf, size_t capacity);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SMITH_H */
