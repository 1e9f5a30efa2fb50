#ifndef OLHTR_H
#define OLHTR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum OlhtrStatus {
  OLHTR_STATUS_OK = 0,
  OLHTR_STATUS_NULL_ARGUMENT = 1,
  OLHTR_STATUS_INVALID_UTF8 = 2,
  OLHTR_STATUS_IO = 3,
  OLHTR_STATUS_BAD_CHECKPOINT = 4,
  OLHTR_STATUS_BAD_INPUT = 5,
  OLHTR_STATUS_INFERENCE = 6,
  OLHTR_STATUS_PANIC = 7,
} OlhtrStatus;

// Opaque handle to a loaded model.
typedef struct OlhtrModel OlhtrModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Loads a checkpoint file into `*out`. `*out` is left untouched on failure.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum OlhtrStatus olhtr_model_load(const char *path, struct OlhtrModel **out);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from [`olhtr_model_load`] and not be used afterwards.
void olhtr_model_free(struct OlhtrModel *model);

// Number of output symbols of the model, excluding reserved tokens.
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum OlhtrStatus olhtr_model_num_symbols(const struct OlhtrModel *model, size_t *out);

// Transcribes `n_points` pen samples laid out as `x, y, pen_down` triples
// (`pen_down` is 0 or 1). The UTF-8 result goes to `*out_text`.
//
// # Safety
// `model` must be a live handle, `points` must hold `3 * n_points` doubles
// and `out_text` must be a valid pointer.
enum OlhtrStatus olhtr_infer(const struct OlhtrModel *model,
                             const double *points,
                             size_t n_points,
                             char **out_text);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not be used afterwards.
void olhtr_string_free(char *s);

// Character error rate of one hypothesis against one reference.
//
// # Safety
// Both strings must be NUL-terminated and `out` a valid pointer.
enum OlhtrStatus olhtr_cer(const char *reference, const char *hypothesis, double *out);

// Message of the last failure on this thread; empty if none. The pointer
// stays valid until the next failing call on the same thread.
const char *olhtr_last_error(void);

// Library version as a static string.
const char *olhtr_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OLHTR_H */
