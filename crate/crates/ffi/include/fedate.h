#ifndef FEDATE_H
#define FEDATE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

#define FEDATE_OK 0

#define FEDATE_ERR_IO 1

#define FEDATE_ERR_PRECONDITION 2

#define FEDATE_ERR_INTERNAL 3

#define FEDATE_ERR_ARGUMENT 4

/**
 * Server aggregation rule selector.
 */
typedef enum FedateAggregator {
  FedateAggregator_MvAgg = 0,
  FedateAggregator_All = 1,
  FedateAggregator_Largest = 2,
} FedateAggregator;

/**
 * Per-site estimator selector.
 */
typedef enum FedateEstimator {
  FedateEstimator_DiffInMeans = 0,
  FedateEstimator_SmoothDpMatching = 1,
  FedateEstimator_GlobalDpMatching = 2,
} FedateEstimator;

/**
 * Opaque handle over a validated dataset.
 */
typedef struct FedateDataset FedateDataset;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent error on this thread. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *fedate_last_error_message(void);

/**
 * Loads a `w,y,x` CSV with an explicit outcome bound and domain size.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
int fedate_dataset_load(const char *path,
                        double outcome_bound,
                        uint32_t domain_size,
                        struct FedateDataset **out);

/**
 * Loads a CSV together with its `<path>.meta.json` sidecar.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
int fedate_dataset_load_with_sidecar(const char *path, struct FedateDataset **out);

/**
 * Builds a dataset from parallel arrays (treatment flags, outcomes,
 * covariate codes).
 *
 * # Safety
 * The three arrays must hold `len` readable elements; `site_id` must be
 * NUL-terminated; `out` must be valid.
 */
int fedate_dataset_from_arrays(const uint8_t *treated,
                               const double *outcomes,
                               const uint32_t *covariates,
                               uintptr_t len,
                               double outcome_bound,
                               uint32_t domain_size,
                               const char *site_id,
                               struct FedateDataset **out);

/**
 * Number of records behind the handle; zero for a null handle.
 *
 * # Safety
 * `dataset` must be a live handle from a `fedate_dataset_*` constructor.
 */
uintptr_t fedate_dataset_len(const struct FedateDataset *dataset);

/**
 * Releases a dataset handle. Null is ignored.
 *
 * # Safety
 * `dataset` must come from a `fedate_dataset_*` constructor and must
 * not be used afterwards.
 */
void fedate_dataset_free(struct FedateDataset *dataset);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from a fedate function returning an allocated string.
 */
void fedate_string_free(char *s);

/**
 * Runs a per-site estimator under an (epsilon, delta) budget with the
 * deterministic stream key `(seed, site, repetition)` and returns the
 * report as a JSON string in `out_json`.
 *
 * # Safety
 * `dataset` must be a live handle and `out_json` a valid pointer.
 */
int fedate_site_report_json(const struct FedateDataset *dataset,
                            enum FedateEstimator estimator,
                            double epsilon,
                            double delta,
                            uint64_t seed,
                            uint32_t site,
                            uint32_t repetition,
                            char **out_json);

/**
 * Aggregates site report JSON strings into a final estimate, returned
 * as a JSON string in `out_json`.
 *
 * # Safety
 * `reports` must point to `n_reports` NUL-terminated strings and
 * `out_json` must be valid.
 */
int fedate_aggregate_json(enum FedateAggregator method,
                          const char *const *reports,
                          uintptr_t n_reports,
                          char **out_json);

/**
 * Local-sensitivity bound of the matching estimate.
 *
 * # Safety
 * `dataset` must be a live handle and `out` a valid pointer.
 */
int fedate_local_sensitivity_bound(const struct FedateDataset *dataset, double *out);

/**
 * Smooth sensitivity of the matching ATE estimate at the given beta.
 *
 * # Safety
 * `dataset` must be a live handle and `out` a valid pointer.
 */
int fedate_smooth_sensitivity_ate(const struct FedateDataset *dataset, double beta, double *out);

/**
 * Smooth sensitivity of the matching variance estimate at the given
 * beta.
 *
 * # Safety
 * `dataset` must be a live handle and `out` a valid pointer.
 */
int fedate_smooth_sensitivity_variance(const struct FedateDataset *dataset,
                                       double beta,
                                       double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDATE_H */
