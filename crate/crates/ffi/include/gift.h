#ifndef GIFT_H
#define GIFT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum GiftStatus {
  GIFT_STATUS_OK = 0,
  GIFT_STATUS_NULL_POINTER = 1,
  GIFT_STATUS_INVALID_UTF8 = 2,
  GIFT_STATUS_INVALID_ARGUMENT = 3,
  GIFT_STATUS_DATA_ERROR = 4,
  GIFT_STATUS_INTERNAL = 5,
  GIFT_STATUS_BUFFER_TOO_SMALL = 6,
} GiftStatus;

// An attention capture with its segment layout and query flags.
typedef struct GiftCapture GiftCapture;

// A built model.
typedef struct GiftModel GiftModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread; empty after success.
// The pointer stays valid until the next call into the library on this
// thread.
const char *gift_last_error(void);

// Build a model from a JSON model config (null selects the defaults).
//
// # Safety
// `config_json` must be null or a NUL-terminated string; `out` must be
// valid for writes.
enum GiftStatus gift_model_new(const char *config_json, struct GiftModel **out);

// Build the default model with the given weight seed.
//
// # Safety
// `out` must be valid for writes.
enum GiftStatus gift_model_new_default(uint64_t seed, struct GiftModel **out);

// # Safety
// `model` must be null or a pointer from `gift_model_new*` not yet freed.
void gift_model_free(struct GiftModel *model);

// Decode a scene and query. `steering_json` is a steering config (null
// selects the defaults). On success `*out_json` holds the transcript JSON.
//
// # Safety
// `model` must be a live handle, the strings NUL-terminated (or null where
// allowed) and `out_json` valid for writes.
enum GiftStatus gift_decode(const struct GiftModel *model,
                            const char *scene_json,
                            const char *query,
                            const char *steering_json,
                            size_t max_new_tokens,
                            char **out_json);

// # Safety
// `s` must be null or a string returned by this library, not yet freed.
void gift_string_free(char *s);

// Load an ATN1 attention capture `[layers, heads, n, n]` from memory.
// `layout` holds four segment lengths: system, visual, query, generated.
// `info_rich` has one byte per query token, nonzero for info-rich tokens.
//
// # Safety
// Pointers must be valid for the given lengths; `layout` for 4 values.
enum GiftStatus gift_capture_from_atn1(const uint8_t *bytes,
                                       size_t len,
                                       const size_t *layout,
                                       const uint8_t *info_rich,
                                       size_t info_rich_len,
                                       struct GiftCapture **out);

// # Safety
// `capture` must be null or a live handle.
void gift_capture_free(struct GiftCapture *capture);

// Layer, head and token counts of a capture. Any out pointer may be null.
//
// # Safety
// `capture` must be a live handle; non-null outs valid for writes.
enum GiftStatus gift_capture_dims(const struct GiftCapture *capture,
                                  size_t *layers,
                                  size_t *heads,
                                  size_t *seq_len,
                                  size_t *visual);

// Min-max normalized shift saliency at `layer`, one float per visual
// token. `*written` receives the required length even when the buffer is
// too small.
//
// # Safety
// `capture` must be a live handle, `out` valid for `out_len` floats and
// `written` null or valid for writes.
enum GiftStatus gift_shift_saliency(const struct GiftCapture *capture,
                                    size_t layer,
                                    double head_fraction,
                                    double clip_k,
                                    float *out,
                                    size_t out_len,
                                    size_t *written);

// Min-max normalized static saliency at `layer`.
//
// # Safety
// As for [`gift_shift_saliency`].
enum GiftStatus gift_static_saliency(const struct GiftCapture *capture,
                                     size_t layer,
                                     double head_fraction,
                                     float *out,
                                     size_t out_len,
                                     size_t *written);

// Softmax of `logits + bias` over `n` entries. Entries whose mask byte is
// nonzero are masked out and get probability 0.
//
// # Safety
// All pointers must be valid for `n` elements.
enum GiftStatus gift_softmax_with_bias(const float *logits,
                                       const float *bias,
                                       const uint8_t *mask,
                                       size_t n,
                                       float *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GIFT_H */
