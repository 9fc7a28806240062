#ifndef DEEP_DISASTER_H
#define DEEP_DISASTER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum DdStatus {
  DD_OK = 0,
  // A required pointer was null.
  DD_ERR_NULL = 1,
  // Arguments out of range or inconsistent.
  DD_ERR_INVALID = 2,
  DD_ERR_IO = 3,
  DD_ERR_CONFIG = 4,
  DD_ERR_CHECKPOINT = 5,
  DD_ERR_SHAPE = 6,
  // Non-finite or undefined numeric result.
  DD_ERR_NUMERIC = 7,
  // Internal error; the library state is unchanged.
  DD_ERR_PANIC = 8,
  // Output buffer too small; the required length is reported.
  DD_ERR_BUFFER_TOO_SMALL = 9,
} DdStatus;

// Saliency method selector.
typedef enum DdSaliencyMethod {
  DD_VANILLA = 0,
  DD_SMOOTHGRAD = 1,
  DD_GUIDED = 2,
} DdSaliencyMethod;

// Opaque experiment configuration.
typedef struct DdConfig DdConfig;

// Opaque distilled student together with its teacher.
typedef struct DdModel DdModel;

// Score components of one image.
typedef struct DdScoreParts {
  double l_term;
  double r_term;
  double v_term;
  double d_term;
  double d_weighted;
  double raw;
} DdScoreParts;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread (empty if none). Valid
// until the next call on the same thread.
const char *dd_last_error(void);

// Library name and version, NUL-terminated, static.
const char *dd_version(void);

// New configuration holding the defaults.
//
// # Safety
// `out` must be a valid pointer to writable storage for a handle.
enum DdStatus dd_config_default(struct DdConfig **out);

// Parse and validate a TOML config document; omitted keys keep defaults.
//
// # Safety
// `toml` must be a NUL-terminated string; `out` must be writable.
enum DdStatus dd_config_parse(const char *toml, struct DdConfig **out);

// Render the config as TOML into `buf`.
//
// # Safety
// `config` must come from this library; `buf` must hold `cap` bytes;
// `needed` may be null.
enum DdStatus dd_config_to_toml(const struct DdConfig *config,
                                char *buf,
                                size_t cap,
                                size_t *needed);

// Short content hash of the config, as hex.
//
// # Safety
// As for [`dd_config_to_toml`].
enum DdStatus dd_config_hash(const struct DdConfig *config, char *buf, size_t cap, size_t *needed);

// # Safety
// `config` must come from this library or be null; it is invalid afterwards.
void dd_config_free(struct DdConfig *config);

// Load a distilled student and its teacher from checkpoint files.
//
// # Safety
// Paths must be NUL-terminated strings; `out` must be writable.
enum DdStatus dd_model_load(const char *student_path,
                            const char *teacher_path,
                            struct DdModel **out);

// # Safety
// `model` must come from this library or be null; it is invalid afterwards.
void dd_model_free(struct DdModel *model);

// Input geometry the model expects.
//
// # Safety
// `model` must come from this library; outputs must be writable or null.
enum DdStatus dd_model_input_shape(const struct DdModel *model,
                                   size_t *image_size,
                                   size_t *channels);

// Anomaly scores of `n` images. `raw_out` receives `n` raw scores;
// `parts_out`, if not null, `n` component records.
//
// # Safety
// `pixels` must hold `n * channels * size * size` doubles; outputs must
// hold `n` entries.
enum DdStatus dd_model_score(const struct DdModel *model,
                             const double *pixels,
                             size_t n,
                             double *raw_out,
                             struct DdScoreParts *parts_out);

// Normalized `size x size` saliency map of one image.
//
// # Safety
// `pixels` must hold one image; `map_out` must hold `size * size` doubles.
enum DdStatus dd_model_saliency(const struct DdModel *model,
                                enum DdSaliencyMethod method,
                                const double *pixels,
                                uint64_t seed,
                                double *map_out);

// AUC-ROC of `n` scores against binary labels, ties counting one half.
//
// # Safety
// `scores` and `labels` must hold `n` entries; `out` must be writable.
enum DdStatus dd_auc_roc(const double *scores, const uint8_t *labels, size_t n, double *out);

// Threshold maximizing Youden's J; scores at or above it are damage.
//
// # Safety
// As for [`dd_auc_roc`].
enum DdStatus dd_estimate_threshold(const double *scores,
                                    const uint8_t *labels,
                                    size_t n,
                                    double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DEEP_DISASTER_H */
