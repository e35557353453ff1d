#ifndef GAZELAB_H
#define GAZELAB_H

/* Generated from the Rust sources by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Success.
 */
#define GAZELAB_OK 0

/**
 * Bad arguments, malformed files, or failed validation.
 */
#define GAZELAB_ERR_INVALID 2

/**
 * I/O or numeric failure.
 */
#define GAZELAB_ERR_RUNTIME 3

/**
 * Uncalibrated gaze channels only.
 */
#define GAZELAB_AXIS_OPTICAL 0

/**
 * Calibrated gaze channels only.
 */
#define GAZELAB_AXIS_VISUAL 1

/**
 * Optical and calibrated channels stacked.
 */
#define GAZELAB_AXIS_BOTH 2

/**
 * Current-generation pipeline noise profile.
 */
#define GAZELAB_PIPELINE_NEW 0

/**
 * Legacy pipeline noise profile.
 */
#define GAZELAB_PIPELINE_OLD 1

/**
 * Verification calibrated with the verifier's model from the enrollment depth.
 */
#define GAZELAB_SCENARIO_S1 1

/**
 * Verification calibrated with the verifier's model from the other depth.
 */
#define GAZELAB_SCENARIO_S2 2

/**
 * Verification calibrated with the claimed user's model (experimental).
 */
#define GAZELAB_SCENARIO_S3 3

/**
 * Gaze seconds consumed per enrollment or verification attempt.
 */
#define GAZELAB_VERIFICATION_SECONDS 20

/**
 * A loaded corpus with its fitted per-subject calibration models.
 */
typedef struct GazelabDataset GazelabDataset;

/**
 * A trained embedder checkpoint.
 */
typedef struct GazelabModel GazelabModel;

/**
 * Fold-aggregated verification metrics, as fractions in [0, 1].
 */
typedef struct GazelabMetrics {
  double eer_mean;
  double eer_sd;
  double frr_mean;
  double frr_sd;
  /**
   * Nonzero when some fold could not resolve the FAR target.
   */
  int32_t unresolved_far;
} GazelabMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *gazelab_version(void);

/**
 * Message of the most recent failure on this thread; empty if none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *gazelab_last_error(void);

/**
 * Synthesize a corpus in memory and fit its calibration models. Counts of
 * zero are rejected; `task_recordings` must be at least 2 for evaluation.
 *
 * # Safety
 * `out` must point to writable storage for one pointer.
 */
int32_t gazelab_dataset_generate(uint64_t seed,
                                 size_t train_subjects,
                                 size_t test_subjects,
                                 size_t task_recordings,
                                 size_t folds,
                                 int32_t pipeline,
                                 struct GazelabDataset **out);

/**
 * Load a dataset directory written by the CLI and fit its calibration
 * models.
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` must point to writable
 * storage for one pointer.
 */
int32_t gazelab_dataset_load(const char *dir, struct GazelabDataset **out);

/**
 * Free a dataset handle. A null handle is a no-op.
 *
 * # Safety
 * `ds` must be a pointer returned by a dataset constructor, not yet freed.
 */
void gazelab_dataset_free(struct GazelabDataset *ds);

/**
 * Subject and fold counts of a dataset. Any output pointer may be null to
 * skip that count.
 *
 * # Safety
 * `ds` must be a live dataset handle; non-null outputs must be writable.
 */
int32_t gazelab_dataset_counts(const struct GazelabDataset *ds,
                               size_t *train_subjects,
                               size_t *test_subjects,
                               size_t *folds);

/**
 * Load a trained checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must point to writable
 * storage for one pointer.
 */
int32_t gazelab_model_load(const char *path, struct GazelabModel **out);

/**
 * Free a model handle. A null handle is a no-op.
 *
 * # Safety
 * `model` must be a pointer returned by `gazelab_model_load`, not yet freed.
 */
void gazelab_model_free(struct GazelabModel *model);

/**
 * Axis code, filter flag, and embedding width of a model. Any output
 * pointer may be null to skip that field.
 *
 * # Safety
 * `model` must be a live model handle; non-null outputs must be writable.
 */
int32_t gazelab_model_info(const struct GazelabModel *model,
                           int32_t *axis,
                           int32_t *filter_on,
                           size_t *embedding_dim);

/**
 * Score one verification attempt: the subject `claimed` is enrolled from
 * their first task recording, the subject `actual` verifies with their
 * second, calibrated per the scenario. Higher similarity means accept.
 *
 * # Safety
 * Handles must be live; strings NUL-terminated; `out_similarity` writable.
 */
int32_t gazelab_verify_score(const struct GazelabModel *model,
                             const struct GazelabDataset *ds,
                             const char *claimed_subject,
                             const char *actual_subject,
                             int32_t scenario,
                             int32_t experimental,
                             double *out_similarity);

/**
 * Evaluate a model over the dataset's test folds and aggregate the per-fold
 * equal-error rate and the false-rejection rate at `far_target`.
 *
 * # Safety
 * Handles must be live; `out` must point to writable metrics storage.
 */
int32_t gazelab_evaluate(const struct GazelabModel *model,
                         const struct GazelabDataset *ds,
                         int32_t scenario,
                         int32_t experimental,
                         double far_target,
                         struct GazelabMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GAZELAB_H */
