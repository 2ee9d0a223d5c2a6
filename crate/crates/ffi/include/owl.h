#ifndef OWL_H
#define OWL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum OwlStatus {
  OWL_STATUS_OK = 0,
  OWL_STATUS_NULL_POINTER = 1,
  OWL_STATUS_INVALID_ARGUMENT = 2,
  OWL_STATUS_IO = 3,
  OWL_STATUS_FORMAT = 4,
  OWL_STATUS_NUMERIC = 5,
  OWL_STATUS_PLAN_MISMATCH = 6,
  OWL_STATUS_PANIC = 7,
} OwlStatus;

typedef struct OwlCheckpoint OwlCheckpoint;

typedef struct OwlCorpus OwlCorpus;

typedef struct OwlPlan OwlPlan;

typedef struct OwlProfile OwlProfile;

typedef struct OwlStats OwlStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or NULL after a
// success. Valid until the next call into the library on this thread.
const char *owl_last_error(void);

// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum OwlStatus owl_checkpoint_load(const char *path, struct OwlCheckpoint **out);

// # Safety
// `ckpt` must come from this library; `path` must be NUL-terminated.
enum OwlStatus owl_checkpoint_save(const struct OwlCheckpoint *ckpt, const char *path);

// Number of weights in the prunable projections.
//
// # Safety
// `ckpt` must come from this library and `out` must be valid.
enum OwlStatus owl_checkpoint_prunable_params(const struct OwlCheckpoint *ckpt, size_t *out);

// # Safety
// `ckpt` must be NULL or a handle from this library not yet freed.
void owl_checkpoint_free(struct OwlCheckpoint *ckpt);

// # Safety
// `path` must be NUL-terminated and `out` valid.
enum OwlStatus owl_corpus_load(const char *path, struct OwlCorpus **out);

// # Safety
// `tokens` must hold `len` ids and `out` must be valid.
enum OwlStatus owl_corpus_from_tokens(size_t vocab_size,
                                      const uint32_t *tokens,
                                      size_t len,
                                      struct OwlCorpus **out);

// # Safety
// `corpus` must be NULL or an unfreed handle from this library.
void owl_corpus_free(struct OwlCorpus *corpus);

// Samples `nsamples` windows of `seqlen` tokens with `seed` and collects
// per-layer input feature norms.
//
// # Safety
// Handles must come from this library and `out` must be valid.
enum OwlStatus owl_calibrate(const struct OwlCheckpoint *ckpt,
                             const struct OwlCorpus *corpus,
                             size_t nsamples,
                             size_t seqlen,
                             uint64_t seed,
                             struct OwlStats **out);

// # Safety
// `stats` must be NULL or an unfreed handle from this library.
void owl_stats_free(struct OwlStats *stats);

// `granularity` is `"per_layer"` or `"per_block"`.
//
// # Safety
// Handles must come from this library, `granularity` must be
// NUL-terminated and `out` valid.
enum OwlStatus owl_profile_build(const struct OwlCheckpoint *ckpt,
                                 const struct OwlStats *stats,
                                 double m,
                                 const char *granularity,
                                 struct OwlProfile **out);

// # Safety
// `profile` must come from this library and `out` must be valid.
enum OwlStatus owl_profile_len(const struct OwlProfile *profile, size_t *out);

// Outlier ratio of unit `index`, in model order.
//
// # Safety
// `profile` must come from this library and `out` must be valid.
enum OwlStatus owl_profile_ratio(const struct OwlProfile *profile, size_t index, double *out);

// # Safety
// `profile` must be NULL or an unfreed handle from this library.
void owl_profile_free(struct OwlProfile *profile);

// `scheme` is one of `uniform`, `owl`, `owl-inverse`, `er`, `er-plus`.
// `ckpt` supplies layer shapes for the ER schemes.
//
// # Safety
// Handles must come from this library, `scheme` must be NUL-terminated
// and `out` valid.
enum OwlStatus owl_plan_allocate(const struct OwlProfile *profile,
                                 const struct OwlCheckpoint *ckpt,
                                 const char *scheme,
                                 double sparsity,
                                 double lambda,
                                 struct OwlPlan **out);

// # Safety
// `plan` must come from this library and `out` must be valid.
enum OwlStatus owl_plan_len(const struct OwlPlan *plan, size_t *out);

// # Safety
// `plan` must come from this library and `out` must be valid.
enum OwlStatus owl_plan_sparsity(const struct OwlPlan *plan, size_t index, double *out);

// # Safety
// `plan` must be NULL or an unfreed handle from this library.
void owl_plan_free(struct OwlPlan *plan);

// Prunes a copy of `ckpt` following `plan`. `metric` is `magnitude` or
// `wanda`; `grouping` is `per_output`, `per_layer`, `per_block` or
// `global`.
//
// # Safety
// Handles must come from this library, strings must be NUL-terminated
// and `out` valid.
enum OwlStatus owl_prune(const struct OwlCheckpoint *ckpt,
                         const struct OwlStats *stats,
                         const struct OwlPlan *plan,
                         const char *metric,
                         const char *grouping,
                         struct OwlCheckpoint **out);

// Perplexity over non-overlapping windows of `seqlen` tokens.
//
// # Safety
// Handles must come from this library and `out` must be valid.
enum OwlStatus owl_perplexity(const struct OwlCheckpoint *ckpt,
                              const struct OwlCorpus *corpus,
                              size_t seqlen,
                              double *out);

// Fraction of `rows * cols` row-major scores strictly above `m` times
// their mean.
//
// # Safety
// `scores` must hold `rows * cols` values and `out` must be valid.
enum OwlStatus owl_outlier_ratio(const float *scores,
                                 size_t rows,
                                 size_t cols,
                                 double m,
                                 double *out);

// Outlier-weighted sparsities for `n` units with ratios `ratios` and
// parameter counts `params`, written to `out` (length `n`). The
// parameter-weighted mean equals `sparsity` and every value stays within
// `lambda` of it.
//
// # Safety
// `ratios`, `params` and `out` must each hold `n` elements.
enum OwlStatus owl_allocate_raw(const double *ratios,
                                const size_t *params,
                                size_t n,
                                double sparsity,
                                double lambda,
                                double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OWL_H */
