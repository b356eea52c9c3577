#ifndef ENTROPY_MONITOR_H
#define ENTROPY_MONITOR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum EmDirection {
  EM_DIRECTION_ADVERSARIAL_BELOW = 0,
  EM_DIRECTION_ADVERSARIAL_ABOVE = 1,
} EmDirection;

typedef enum EmLabel {
  EM_LABEL_CLEAN = 0,
  EM_LABEL_ADVERSARIAL = 1,
} EmLabel;

// Result code of every fallible call. Error values match the CLI exit codes.
typedef enum EmStatus {
  EM_STATUS_OK = 0,
  EM_STATUS_NULL_POINTER = 1,
  EM_STATUS_CONFIG = 3,
  EM_STATUS_DATA = 4,
  EM_STATUS_FORMAT = 5,
  EM_STATUS_COMPATIBILITY = 6,
  EM_STATUS_CALIBRATION = 7,
  EM_STATUS_IO = 8,
  EM_STATUS_BUFFER_TOO_SMALL = 9,
  EM_STATUS_PANIC = 10,
} EmStatus;

typedef enum EmThresholdSource {
  EM_THRESHOLD_SOURCE_MIDPOINT = 0,
  EM_THRESHOLD_SOURCE_OPTIMIZED = 1,
} EmThresholdSource;

// One layer's activation tensor.
typedef struct EmActivationBatch EmActivationBatch;

// Per-layer bin edges.
typedef struct EmBinningScheme EmBinningScheme;

// Baseline entropy profile of one layer.
typedef struct EmProfile EmProfile;

typedef struct EmEntropyEstimate {
  double entropy_bits;
  uint64_t sample_count;
  bool empty;
} EmEntropyEstimate;

typedef struct EmSampleStats {
  double mean;
  double std;
  double min;
  double max;
} EmSampleStats;

typedef struct EmThreshold {
  double tau;
  enum EmDirection direction;
  enum EmThresholdSource source;
  double train_fpr;
  double train_fnr;
} EmThreshold;

typedef struct EmMetrics {
  uint64_t tp;
  uint64_t tn;
  uint64_t fp;
  uint64_t fn_;
  double accuracy;
  double fpr;
  double fnr;
  double tpr;
  double tnr;
  bool no_negatives;
  bool no_positives;
} EmMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. Valid until the
// next call into this library on the same thread.
const char *em_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *em_version(void);

// The built-in adaptive scheme for `features.0` and `classifier.3`.
struct EmBinningScheme *em_binning_default(void);

// Loads a scheme from a TOML file with a `[layers]` table.
enum EmStatus em_binning_from_toml_file(const char *path, struct EmBinningScheme **out);

void em_binning_free(struct EmBinningScheme *scheme);

// Copies the edges for `layer_key` into `buf`. `out_len` always receives
// the edge count; `EM_STATUS_BUFFER_TOO_SMALL` when `cap` is short.
enum EmStatus em_binning_edges(const struct EmBinningScheme *scheme,
                               const char *layer_key,
                               double *buf,
                               uintptr_t cap,
                               uintptr_t *out_len);

// `-sum p log2 p` over a probability vector.
enum EmStatus em_shannon_entropy(const double *probabilities, uintptr_t len, double *out);

// Batch-level entropy of a raw activation tensor.
enum EmStatus em_batch_entropy(const struct EmBinningScheme *scheme,
                               const char *layer_key,
                               const uintptr_t *shape,
                               uintptr_t ndim,
                               const float *values,
                               uintptr_t len,
                               struct EmEntropyEstimate *out);

// Entropy of a batch handle.
enum EmStatus em_activation_batch_entropy(const struct EmBinningScheme *scheme,
                                          const struct EmActivationBatch *batch,
                                          struct EmEntropyEstimate *out);

enum EmStatus em_activation_batch_new(const char *layer_key,
                                      const uintptr_t *shape,
                                      uintptr_t ndim,
                                      const float *values,
                                      uintptr_t len,
                                      struct EmActivationBatch **out);

void em_activation_batch_free(struct EmActivationBatch *batch);

// Layer key; owned by the handle.
const char *em_activation_batch_layer_key(const struct EmActivationBatch *batch);

uintptr_t em_activation_batch_ndim(const struct EmActivationBatch *batch);

// Pointer to `ndim` dimensions; owned by the handle.
const uintptr_t *em_activation_batch_shape(const struct EmActivationBatch *batch);

uintptr_t em_activation_batch_len(const struct EmActivationBatch *batch);

// Pointer to the row-major values; owned by the handle.
const float *em_activation_batch_values(const struct EmActivationBatch *batch);

enum EmStatus em_dump_read_file(const char *path, struct EmActivationBatch **out);

enum EmStatus em_dump_write_file(const struct EmActivationBatch *batch, const char *path);

// Parses an in-memory dump.
enum EmStatus em_dump_decode(const uint8_t *bytes, uintptr_t len, struct EmActivationBatch **out);

// Encodes a batch into `buf`. `out_len` always receives the encoded size;
// `EM_STATUS_BUFFER_TOO_SMALL` when `cap` is short.
enum EmStatus em_dump_encode(const struct EmActivationBatch *batch,
                             uint8_t *buf,
                             uintptr_t cap,
                             uintptr_t *out_len);

// Builds a profile from training-batch entropies. `adversarial` may be
// NULL when `n_adversarial` is 0.
enum EmStatus em_profile_new(const char *layer_key,
                             const double *clean,
                             uintptr_t n_clean,
                             const double *adversarial,
                             uintptr_t n_adversarial,
                             uintptr_t batch_size,
                             struct EmProfile **out);

void em_profile_free(struct EmProfile *profile);

// Summary statistics. `adversarial` may be NULL; `has_adversarial`
// reports whether adversarial samples exist.
enum EmStatus em_profile_stats(const struct EmProfile *profile,
                               struct EmSampleStats *clean,
                               struct EmSampleStats *adversarial,
                               bool *has_adversarial);

enum EmStatus em_threshold_midpoint(const struct EmProfile *profile, struct EmThreshold *out);

// Threshold minimizing `fnr_weight * FNR + fpr_weight * FPR` on the
// profile's training samples.
enum EmStatus em_threshold_optimize(const struct EmProfile *profile,
                                    double fpr_weight,
                                    double fnr_weight,
                                    struct EmThreshold *out);

// Labels one batch entropy. Empty estimates yield `EM_STATUS_DATA`.
enum EmStatus em_classify(const struct EmEntropyEstimate *estimate,
                          const struct EmThreshold *threshold,
                          enum EmLabel *out);

// Weighted direction-signed z-score over `n` layers.
enum EmStatus em_fuse_scores(const struct EmProfile *const *profiles,
                             const double *entropies,
                             const double *weights,
                             uintptr_t n,
                             double *out);

// Confusion metrics with adversarial as the positive class.
enum EmStatus em_evaluate(const enum EmLabel *predicted,
                          const enum EmLabel *truth,
                          uintptr_t n,
                          struct EmMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ENTROPY_MONITOR_H */
