/* C interface for the adapter lab. Regenerated by the ffi crate's build script; do not edit. */

#ifndef ADAPTERLAB_H
#define ADAPTERLAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Outcome of a call. Anything but `Ok` leaves a message in
 * [`alab_last_error`].
 */
typedef enum AlabStatus {
  ALAB_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  ALAB_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  ALAB_STATUS_INVALID_UTF8 = 2,
  /**
   * The model configuration was rejected.
   */
  ALAB_STATUS_BAD_CONFIG = 3,
  /**
   * A file could not be read, written, or decoded.
   */
  ALAB_STATUS_IO = 4,
  /**
   * The operation itself failed (bad attach point, generation error).
   */
  ALAB_STATUS_RUNTIME = 5,
  /**
   * A bug: the library panicked. The handle is still safe to free.
   */
  ALAB_STATUS_PANIC = 6,
} AlabStatus;

/**
 * An owned model plus whatever adapters are attached. Create with
 * [`alab_model_new`] or [`alab_model_load`], release with
 * [`alab_model_free`].
 */
typedef struct AlabModel AlabModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. Never null;
 * empty before the first failure. The pointer stays valid until the
 * next failing call on the same thread.
 */
const char *alab_last_error(void);

/**
 * Library version as a static string.
 */
const char *alab_version(void);

/**
 * Builds a fresh model. `out` receives the handle on `Ok` and is left
 * untouched otherwise.
 */
enum AlabStatus alab_model_new(uintptr_t dim,
                               uintptr_t n_layers,
                               uintptr_t n_heads,
                               uintptr_t context_len,
                               uint64_t seed,
                               struct AlabModel **out);

/**
 * Loads a model saved by [`alab_model_save`].
 */
enum AlabStatus alab_model_load(const char *path, struct AlabModel **out);

/**
 * Writes the base weights (adapters excluded) to `path`.
 */
enum AlabStatus alab_model_save(const struct AlabModel *model, const char *path);

/**
 * Releases a handle. Null is a no-op.
 */
void alab_model_free(struct AlabModel *model);

/**
 * Attaches every adapter in the file to its named point. Points that
 * already hold an adapter reject the attach.
 */
enum AlabStatus alab_model_attach_file(struct AlabModel *model, const char *path);

/**
 * Detaches every adapter, restoring the base model.
 */
enum AlabStatus alab_model_detach_all(struct AlabModel *model);

/**
 * Greedy completion of a UTF-8 prompt. On `Ok`, `out` receives a
 * NUL-terminated string owned by the caller; release it with
 * [`alab_string_free`].
 */
enum AlabStatus alab_model_complete(const struct AlabModel *model,
                                    const char *prompt,
                                    uintptr_t max_new_tokens,
                                    char **out);

/**
 * Frees a string returned by [`alab_model_complete`]. Null is a no-op.
 */
void alab_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ADAPTERLAB_H */
