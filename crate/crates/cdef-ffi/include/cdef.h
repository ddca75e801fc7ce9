#ifndef CDEF_H
#define CDEF_H

/* This file is generated by cbindgen from cdef-ffi; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible call.
typedef enum CdefStatus {
  CDEF_STATUS_OK = 0,
  // A required pointer argument was null.
  CDEF_STATUS_NULL_ARGUMENT = 1,
  // An argument failed validation (bad length, class out of range, ...).
  CDEF_STATUS_INVALID_ARGUMENT = 2,
  // A string argument was not valid UTF-8.
  CDEF_STATUS_UTF8 = 3,
  // File could not be read.
  CDEF_STATUS_IO = 4,
  // The underlying computation failed; see `cdef_last_error`.
  CDEF_STATUS_RUNTIME = 5,
} CdefStatus;

// Opaque handle to a loaded model.
typedef struct CdefModel CdefModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message for this thread into `buf` (truncated,
// always NUL-terminated when `cap > 0`) and returns the full message
// length in bytes, excluding the terminator.
//
// # Safety
// `buf` must point to at least `cap` writable bytes, or be null.
uintptr_t cdef_last_error(char *buf, uintptr_t cap);

// Library version as a static NUL-terminated string.
const char *cdef_version(void);

// Parses a model from its JSON serialization.
//
// # Safety
// `json` must be a NUL-terminated string; `out` must be writable.
enum CdefStatus cdef_model_from_json(const char *json, struct CdefModel **out);

// Loads a model from a JSON file on disk.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum CdefStatus cdef_model_load(const char *path, struct CdefModel **out);

// Releases a model handle. Null is a no-op.
//
// # Safety
// `model` must be a pointer previously returned by a constructor, and
// must not be used afterwards.
void cdef_model_free(struct CdefModel *model);

// Input dimension of the model, or 0 if `model` is null.
//
// # Safety
// `model` must be a live handle or null.
uintptr_t cdef_model_input_dim(const struct CdefModel *model);

// Number of classes, or 0 if `model` is null.
//
// # Safety
// `model` must be a live handle or null.
uintptr_t cdef_model_n_classes(const struct CdefModel *model);

// Predicted class for the feature vector `x` of length `len`.
//
// # Safety
// `x` must point to `len` readable doubles; `out_class` must be writable.
enum CdefStatus cdef_model_predict(const struct CdefModel *model,
                                   const double *x,
                                   uintptr_t len,
                                   uintptr_t *out_class);

// Class probabilities for `x`; `out_probs` must hold `n_classes` doubles.
//
// # Safety
// `x` must point to `len` readable doubles; `out_probs` must point to
// `out_cap` writable doubles.
enum CdefStatus cdef_model_probs(const struct CdefModel *model,
                                 const double *x,
                                 uintptr_t len,
                                 double *out_probs,
                                 uintptr_t out_cap);

// Crafts a targeted PGD adversarial example from `x` toward `target`.
// Writes the perturbed input to `x_adv` (`len` doubles), the model's
// prediction on it to `out_predicted`, and whether the attack hit the
// target to `out_success` (any of the three may be null to skip it).
//
// # Safety
// `x` must point to `len` readable doubles; non-null output pointers must
// be writable (`x_adv` for `len` doubles).
enum CdefStatus cdef_attack_pgd(const struct CdefModel *model,
                                const double *x,
                                uintptr_t len,
                                uintptr_t target,
                                double epsilon,
                                double alpha,
                                uintptr_t steps,
                                bool random_start,
                                uint64_t seed,
                                double *x_adv,
                                uintptr_t *out_predicted,
                                bool *out_success);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CDEF_H */
