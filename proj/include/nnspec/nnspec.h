#ifndef NNSPEC_NNSPEC_H
#define NNSPEC_NNSPEC_H

/* C interface to the nnspec analysis library.
 *
 * Every function returns an nnspec_status. On failure the message is
 * available from nnspec_last_error() until the next call on the same thread.
 * Handles are opaque; each *_free accepts NULL. Strings returned through
 * `const char**` stay valid for the lifetime of the handle they came from.
 * Per-sample score arrays hold NaN where a sample was excluded. */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#  if defined(NNSPEC_BUILDING)
#    define NNSPEC_API __declspec(dllexport)
#  else
#    define NNSPEC_API __declspec(dllimport)
#  endif
#else
#  define NNSPEC_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum nnspec_status {
  NNSPEC_OK = 0,
  NNSPEC_ERR_ARGUMENT = 1,   /* null pointer, bad index, short buffer */
  NNSPEC_ERR_IO = 2,
  NNSPEC_ERR_FORMAT = 3,
  NNSPEC_ERR_VALIDATION = 4,
  NNSPEC_ERR_SHAPE = 5,
  NNSPEC_ERR_NUMERIC = 6,
  NNSPEC_ERR_TOPOLOGY = 7,
  NNSPEC_ERR_DOMAIN = 8,
  NNSPEC_ERR_INTERNAL = 9
} nnspec_status;

typedef enum nnspec_orientation {
  NNSPEC_HIGHER_IS_ID = 0,
  NNSPEC_HIGHER_IS_OOD = 1
} nnspec_orientation;

typedef struct nnspec_model nnspec_model;
typedef struct nnspec_dataset nnspec_dataset;
typedef struct nnspec_features nnspec_features;
typedef struct nnspec_covariance nnspec_covariance;
typedef struct nnspec_cka_grid nnspec_cka_grid;
typedef struct nnspec_sensitivity nnspec_sensitivity;

typedef struct nnspec_similarity {
  double cka;
  double lr;
  double cca;
  double cka_matrix_stable_rank;
  size_t gram_dims_a;
  size_t gram_dims_b;
  size_t cka_dims;
} nnspec_similarity;

typedef struct nnspec_quantiles {
  double median;
  double q25;
  double q75;
} nnspec_quantiles;

NNSPEC_API const char* nnspec_version(void);
NNSPEC_API const char* nnspec_last_error(void);
NNSPEC_API const char* nnspec_status_name(nnspec_status status);

/* Taps are layer ids, or "input" for the normalized image. Features are read
 * after the layer has run. */
NNSPEC_API const char* nnspec_tap_position(void);

/* ---- model ---- */

NNSPEC_API nnspec_status nnspec_model_load(const char* manifest_path, nnspec_model** out);
NNSPEC_API void nnspec_model_free(nnspec_model* model);
NNSPEC_API nnspec_status nnspec_model_name(const nnspec_model* model, const char** out);
NNSPEC_API nnspec_status nnspec_model_class_count(const nnspec_model* model, size_t* out);
NNSPEC_API nnspec_status nnspec_model_weighted_count(const nnspec_model* model, size_t* out);
NNSPEC_API nnspec_status nnspec_model_weighted_id(const nnspec_model* model, size_t index,
                                                  const char** out);
/* The layer's post-activation tap and the tap feeding it. */
NNSPEC_API nnspec_status nnspec_model_output_tap(nnspec_model* model, const char* layer_id,
                                                 const char** out);
NNSPEC_API nnspec_status nnspec_model_input_tap(nnspec_model* model, const char* layer_id,
                                                const char** out);
NNSPEC_API nnspec_status nnspec_model_tap_index(const nnspec_model* model, const char* tap,
                                                size_t* out);
NNSPEC_API nnspec_status nnspec_model_is_block_boundary(const nnspec_model* model,
                                                        const char* tap, int* out);

/* ---- datasets ---- */

NNSPEC_API nnspec_status nnspec_dataset_load(const char* path, nnspec_dataset** out);
NNSPEC_API void nnspec_dataset_free(nnspec_dataset* dataset);
NNSPEC_API nnspec_status nnspec_dataset_count(const nnspec_dataset* dataset, size_t* out);
NNSPEC_API nnspec_status nnspec_dataset_has_labels(const nnspec_dataset* dataset, int* out);
NNSPEC_API nnspec_status nnspec_dataset_labels(const nnspec_dataset* dataset, int* out,
                                               size_t len);
NNSPEC_API nnspec_status nnspec_dataset_subset(const nnspec_dataset* dataset,
                                               const size_t* indices, size_t count,
                                               nnspec_dataset** out);

/* `count` distinct indices from [0, population), ascending. */
NNSPEC_API nnspec_status nnspec_sample_indices(size_t population, size_t count, uint64_t seed,
                                               size_t* out);
NNSPEC_API uint64_t nnspec_derive_seed(uint64_t root, uint64_t stream);

/* ---- spectral ---- */

NNSPEC_API nnspec_status nnspec_weight_stable_rank(const nnspec_model* model,
                                                   const char* layer_id, double* out);
NNSPEC_API nnspec_status nnspec_parameter_census(const nnspec_model* model, double epsilon,
                                                 uint64_t* kept, uint64_t* total);

/* ---- forward passes ---- */

/* Runs the model over every sample of `dataset` and keeps logits plus the
 * listed taps. */
NNSPEC_API nnspec_status nnspec_features_compute(const nnspec_model* model,
                                                 const nnspec_dataset* dataset,
                                                 const char* const* taps, size_t tap_count,
                                                 size_t batch_size, nnspec_features** out);
NNSPEC_API void nnspec_features_free(nnspec_features* features);
NNSPEC_API nnspec_status nnspec_features_logits(const nnspec_features* features,
                                                const float** data, size_t* rows,
                                                size_t* cols);

/* Logits with conv/linear weights truncated at relative cut `epsilon`. */
NNSPEC_API nnspec_status nnspec_forward_truncated(const nnspec_model* model, double epsilon,
                                                  const nnspec_dataset* dataset,
                                                  size_t batch_size, float* out, size_t len);

/* ---- scores and metrics ---- */

NNSPEC_API nnspec_status nnspec_max_softmax(const float* logits, size_t rows, size_t cols,
                                            double* out);
NNSPEC_API nnspec_status nnspec_prediction_rates(const float* logits, size_t rows,
                                                 size_t cols, double* out);
NNSPEC_API nnspec_status nnspec_accuracy(const float* logits, size_t rows, size_t cols,
                                         const int* labels, double* out);
NNSPEC_API nnspec_status nnspec_coefficient_of_variation(const double* rates, size_t count,
                                                         double* out);
/* NaN entries are skipped. */
NNSPEC_API nnspec_status nnspec_auroc(const double* id, size_t id_count, const double* ood,
                                      size_t ood_count, nnspec_orientation orientation,
                                      double* out);
NNSPEC_API nnspec_status nnspec_quantile_summary(const double* values, size_t count,
                                                 nnspec_quantiles* out);

/* ---- feature (Mahalanobis) detector ---- */

/* Fits class means and tied covariance at `tap` from features of the
 * labelled `train` set. */
NNSPEC_API nnspec_status nnspec_covariance_fit(const nnspec_model* model,
                                               const nnspec_features* train_features,
                                               const nnspec_dataset* train, const char* tap,
                                               nnspec_covariance** out);
NNSPEC_API void nnspec_covariance_free(nnspec_covariance* cov);
NNSPEC_API nnspec_status nnspec_covariance_save(const nnspec_covariance* cov, const char* dir);
NNSPEC_API nnspec_status nnspec_covariance_load(const char* dir, nnspec_covariance** out);
NNSPEC_API nnspec_status nnspec_covariance_tap(const nnspec_covariance* cov, const char** out);
NNSPEC_API nnspec_status nnspec_covariance_stable_rank(const nnspec_covariance* cov,
                                                       double* out);
NNSPEC_API nnspec_status nnspec_mahalanobis(const nnspec_covariance* cov,
                                            const nnspec_features* features, double* out,
                                            size_t len);

/* ---- projection detector ---- */

/* Scores the features entering `layer_id` against its truncated right
 * singular basis. `features` must hold that layer's input tap. */
NNSPEC_API nnspec_status nnspec_projection_scores(const nnspec_model* model,
                                                  const char* layer_id, double epsilon,
                                                  const nnspec_features* features,
                                                  double* norm_out, double* ratio_out,
                                                  size_t len);

/* ---- similarity ---- */

NNSPEC_API nnspec_status nnspec_cka_grid_compute(const nnspec_model* model,
                                                 const nnspec_dataset* dataset,
                                                 const char* const* taps, size_t tap_count,
                                                 size_t sample_count, uint64_t seed,
                                                 size_t batch_size, nnspec_cka_grid** out);
NNSPEC_API void nnspec_cka_grid_free(nnspec_cka_grid* grid);
NNSPEC_API nnspec_status nnspec_cka_grid_size(const nnspec_cka_grid* grid, size_t* out);
NNSPEC_API nnspec_status nnspec_cka_grid_cell(const nnspec_cka_grid* grid, size_t row,
                                              size_t col, nnspec_similarity* out);
/* Heatmap CSV. The whole text is NUL-terminated; `needed` includes the NUL. */
NNSPEC_API nnspec_status nnspec_cka_grid_csv(const nnspec_cka_grid* grid, char* buffer,
                                             size_t capacity, size_t* needed);

/* ---- noise sensitivity ---- */

/* psi from `inject` to each observe tap. `indices` selects samples
 * (NULL means all). */
NNSPEC_API nnspec_status nnspec_sensitivity_compute(const nnspec_model* model,
                                                    const nnspec_dataset* dataset,
                                                    const char* inject,
                                                    const char* const* observe,
                                                    size_t observe_count, double noise_norm,
                                                    uint64_t seed, const size_t* indices,
                                                    size_t index_count, size_t batch_size,
                                                    nnspec_sensitivity** out);
NNSPEC_API void nnspec_sensitivity_free(nnspec_sensitivity* s);
NNSPEC_API nnspec_status nnspec_sensitivity_summary(const nnspec_sensitivity* s, size_t k,
                                                    nnspec_quantiles* out, size_t* count,
                                                    size_t* excluded);
NNSPEC_API nnspec_status nnspec_sensitivity_values(const nnspec_sensitivity* s, size_t k,
                                                   const double** data, size_t* count);
NNSPEC_API nnspec_status nnspec_sensitivity_auroc(const nnspec_sensitivity* id, size_t id_k,
                                                  const nnspec_sensitivity* ood, size_t ood_k,
                                                  double* out);

#ifdef __cplusplus
}
#endif

#endif
