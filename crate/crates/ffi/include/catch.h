#ifndef CATCH_H
#define CATCH_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CatchStatus {
  CATCH_STATUS_OK = 0,
  CATCH_STATUS_NULL_ARGUMENT = 1,
  CATCH_STATUS_INVALID_UTF8 = 2,
  CATCH_STATUS_CONFIG = 3,
  CATCH_STATUS_SHAPE = 4,
  CATCH_STATUS_LOOKUP = 5,
  CATCH_STATUS_IO = 6,
  CATCH_STATUS_FORMAT = 7,
  CATCH_STATUS_CHECKSUM = 8,
  CATCH_STATUS_STATE = 9,
  CATCH_STATUS_CONTRACT = 10,
  CATCH_STATUS_BUFFER_TOO_SMALL = 11,
  CATCH_STATUS_PANIC = 12,
  CATCH_STATUS_OTHER = 13,
} CatchStatus;

// Frozen backbone.
typedef struct CatchBackbone CatchBackbone;

// Image-only domain classifier.
typedef struct CatchClassifier CatchClassifier;

// Per-domain adapter pairs.
typedef struct CatchRegistry CatchRegistry;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread into `buf` (NUL-terminated,
// truncated to fit). Returns the full message length in bytes.
//
// # Safety
// `buf` must be null or valid for `len` bytes.
size_t catch_last_error(char *buf, size_t len);

// Randomly initialised backbone with default sizes, frozen.
//
// # Safety
// `out` must be valid for writes.
enum CatchStatus catch_backbone_init(uint64_t seed, struct CatchBackbone **out);

// Loads a backbone checkpoint; the result is frozen.
//
// # Safety
// `path` must be a NUL-terminated string and `out` valid for writes.
enum CatchStatus catch_backbone_load(const char *path, struct CatchBackbone **out);

// # Safety
// `handle` must come from a backbone constructor and not be used afterwards.
void catch_backbone_free(struct CatchBackbone *handle);

// Hex SHA-256 of the parameter bytes (65 bytes with the NUL).
//
// # Safety
// `handle` must be a live backbone and `buf` valid for `len` bytes.
enum CatchStatus catch_backbone_checksum(const struct CatchBackbone *handle, char *buf, size_t len);

// Loads `registry.json` and its adapter checkpoints from `dir`.
//
// # Safety
// `dir` must be a NUL-terminated string, `backbone` live, `out` valid for writes.
enum CatchStatus catch_registry_load(const char *dir,
                                     const struct CatchBackbone *backbone,
                                     struct CatchRegistry **out);

// # Safety
// `handle` must come from [`catch_registry_load`] and not be used afterwards.
void catch_registry_free(struct CatchRegistry *handle);

// # Safety
// `handle` must be a live registry.
size_t catch_registry_len(const struct CatchRegistry *handle);

// # Safety
// `path` must be a NUL-terminated string and `out` valid for writes.
enum CatchStatus catch_classifier_load(const char *path, struct CatchClassifier **out);

// # Safety
// `handle` must come from [`catch_classifier_load`] and not be used afterwards.
void catch_classifier_free(struct CatchClassifier *handle);

// Predicted domain of a square row-major image; writes its name into `buf`.
//
// # Safety
// `pixels` must hold `n_pixels` values; `buf` must be valid for `len` bytes.
enum CatchStatus catch_classify(const struct CatchClassifier *handle,
                                const double *pixels,
                                size_t n_pixels,
                                char *buf,
                                size_t len);

// Greedy answer to `question` about the image. With both `registry` and
// `classifier` given, the classifier's top domain selects the adapters;
// with either null the frozen backbone answers alone.
//
// # Safety
// Handles must be live or null, `question` NUL-terminated, `pixels` valid
// for `n_pixels` values and `buf` for `len` bytes.
enum CatchStatus catch_answer(const struct CatchBackbone *backbone,
                              const struct CatchRegistry *registry,
                              const struct CatchClassifier *classifier,
                              const double *pixels,
                              size_t n_pixels,
                              const char *question,
                              char *buf,
                              size_t len);

// Library version, NUL-terminated and static.
const char *catch_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CATCH_H */
