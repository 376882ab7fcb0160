#ifndef STRIDER_H
#define STRIDER_H

#include <stddef.h>
#include <stdint.h>

typedef enum StriderStatus {
  STRIDER_STATUS_OK = 0,
  STRIDER_STATUS_NULL_POINTER = 1,
  STRIDER_STATUS_INVALID_ARGUMENT = 2,
  STRIDER_STATUS_IO = 3,
  STRIDER_STATUS_FORMAT = 4,
  STRIDER_STATUS_SHAPE = 5,
  STRIDER_STATUS_BUFFER_TOO_SMALL = 6,
  STRIDER_STATUS_PANIC = 7,
} StriderStatus;

// Opaque network handle. Create with [`strider_network_load`] or
// [`strider_network_new`], release with [`strider_network_free`].
typedef struct StriderNetwork StriderNetwork;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *strider_version(void);

// Copies the last error message of this thread into `buf`.
//
// Returns the length needed including the terminating NUL, or 0 when no
// error is recorded. The copy is truncated when `buf_len` is too small.
//
// # Safety
// `buf` must be null or point to `buf_len` writable bytes.
size_t strider_last_error(char *buf, size_t buf_len);

// Loads a checkpoint file, including its pruning mask if present.
//
// # Safety
// `path` must be a NUL-terminated string and `out_handle` writable.
enum StriderStatus strider_network_load(const char *path, struct StriderNetwork **out_handle);

// Builds a freshly initialized network, e.g. `"1-20-20-50-50-500-10"` with
// kinds `"i-c5-p-c5-p-f-f"` and input size 28.
//
// # Safety
// `arch` and `kinds` must be NUL-terminated strings and `out_handle` writable.
enum StriderStatus strider_network_new(const char *arch,
                                       const char *kinds,
                                       uint32_t input_size,
                                       uint64_t seed,
                                       struct StriderNetwork **out_handle);

// # Safety
// `handle` must be null or come from this library and not be freed twice.
void strider_network_free(struct StriderNetwork *handle);

// Writes the network and its mask to a checkpoint file.
//
// # Safety
// `handle` must be valid and `path` NUL-terminated.
enum StriderStatus strider_network_save(const struct StriderNetwork *handle, const char *path);

// # Safety
// `handle` must be valid and `out_count` writable.
enum StriderStatus strider_network_param_count(const struct StriderNetwork *handle,
                                               uint64_t *out_count);

// Input channels, input side length and number of classes.
//
// # Safety
// `handle` must be valid and all out pointers writable.
enum StriderStatus strider_network_dims(const struct StriderNetwork *handle,
                                        uint32_t *out_channels,
                                        uint32_t *out_size,
                                        uint32_t *out_classes);

// Runs `n` samples (NCHW, row-major) and writes `n × classes` logits.
//
// # Safety
// `input` must hold `input_len` floats and `logits` `logits_len` floats.
enum StriderStatus strider_network_forward(const struct StriderNetwork *handle,
                                           const float *input,
                                           size_t input_len,
                                           size_t n,
                                           float *logits,
                                           size_t logits_len);

// Predicted class of each of `n` samples.
//
// # Safety
// `input` must hold `input_len` floats and `labels` `n` entries.
enum StriderStatus strider_network_predict(const struct StriderNetwork *handle,
                                           const float *input,
                                           size_t input_len,
                                           size_t n,
                                           uint32_t *labels);

// Step size minimizing the squared error of a `levels`-level quantizer.
//
// # Safety
// `weights` must hold `len` floats and `out_step` be writable.
enum StriderStatus strider_optimal_step(const float *weights,
                                        size_t len,
                                        uint32_t levels,
                                        float *out_step);

// Quantizes `len` values into `dst`. A step of 0 copies the input.
//
// # Safety
// `src` and `dst` must each hold `len` floats; they may be the same buffer.
enum StriderStatus strider_quantize(const float *src,
                                    float *dst,
                                    size_t len,
                                    float step,
                                    uint32_t levels);

// Lowered matrix width for a `k × k` kernel with one (stride, offset)
// pattern per input channel.
//
// # Safety
// `strides` and `offsets` must each hold `channels` bytes.
enum StriderStatus strider_strided_width(uint32_t kernel,
                                         const uint8_t *strides,
                                         const uint8_t *offsets,
                                         size_t channels,
                                         uint64_t *out_width);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STRIDER_H */
