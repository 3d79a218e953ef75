#include "nnspec/nnspec.h"

#include <cmath>
#include <cstring>
#include <limits>
#include <map>
#include <new>
#include <string>
#include <vector>

#include "nnspec/error.hpp"
#include "nnspec/feature_stats.hpp"
#include "nnspec/inference.hpp"
#include "nnspec/metrics.hpp"
#include "nnspec/model_io.hpp"
#include "nnspec/random.hpp"
#include "nnspec/sensitivity.hpp"
#include "nnspec/similarity.hpp"
#include "nnspec/spectral.hpp"

struct nnspec_model {
  nnspec::ModelGraph graph;
  std::map<std::string, std::string> tap_cache;
};

struct nnspec_dataset {
  nnspec::DatasetBlob blob;
};

struct nnspec_features {
  nnspec::ForwardResult result;
  std::map<std::string, std::size_t, std::less<>> index;

  const nnspec::FeatureBatch& at(std::string_view tap) const {
    auto it = index.find(tap);
    if (it == index.end())
      throw nnspec::ValidationError("features were not captured at tap '" + std::string(tap) + "'");
    return result.features[it->second];
  }
};

struct nnspec_covariance {
  nnspec::CovarianceBundle bundle;
};

struct nnspec_cka_grid {
  nnspec::CkaGrid grid;
};

struct nnspec_sensitivity {
  std::vector<nnspec::SensitivityReport> reports;
};

namespace {

thread_local std::string g_last_error;

struct ArgumentError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

nnspec_status map_kind(nnspec::ErrorKind kind) {
  switch (kind) {
    case nnspec::ErrorKind::io: return NNSPEC_ERR_IO;
    case nnspec::ErrorKind::format: return NNSPEC_ERR_FORMAT;
    case nnspec::ErrorKind::validation: return NNSPEC_ERR_VALIDATION;
    case nnspec::ErrorKind::shape: return NNSPEC_ERR_SHAPE;
    case nnspec::ErrorKind::numeric: return NNSPEC_ERR_NUMERIC;
    case nnspec::ErrorKind::topology: return NNSPEC_ERR_TOPOLOGY;
    case nnspec::ErrorKind::domain: return NNSPEC_ERR_DOMAIN;
  }
  return NNSPEC_ERR_INTERNAL;
}

template <class F>
nnspec_status guard(F&& body) {
  g_last_error.clear();
  try {
    body();
    return NNSPEC_OK;
  } catch (const nnspec::Error& e) {
    g_last_error = e.what();
    return map_kind(e.kind());
  } catch (const ArgumentError& e) {
    g_last_error = e.what();
    return NNSPEC_ERR_ARGUMENT;
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return NNSPEC_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return NNSPEC_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown exception";
    return NNSPEC_ERR_INTERNAL;
  }
}

template <class... P>
void require(const char* fn, P... pointers) {
  if (((pointers == nullptr) || ...)) throw ArgumentError(std::string(fn) + ": null argument");
}

void require_len(const char* fn, std::size_t got, std::size_t want) {
  if (got < want)
    throw ArgumentError(std::string(fn) + ": buffer holds " + std::to_string(got) +
                        " values, needs " + std::to_string(want));
}

nnspec::Tensor logits_tensor(const float* logits, std::size_t rows, std::size_t cols) {
  if (rows == 0 || cols == 0) throw nnspec::ValidationError("logits must be non-empty");
  return nnspec::Tensor({rows, cols}, std::vector<float>(logits, logits + rows * cols));
}

std::vector<double> finite_only(const double* v, std::size_t n) {
  std::vector<double> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    if (std::isfinite(v[i])) out.push_back(v[i]);
  return out;
}

// ScoreSet drops excluded samples; the C API keeps one slot per sample.
void write_per_sample(const std::vector<double>& raw, double* out) {
  std::copy(raw.begin(), raw.end(), out);
}

std::vector<std::string> tap_list(const char* const* taps, std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) {
    if (!taps[i]) throw ArgumentError("null tap id");
    out.emplace_back(taps[i]);
  }
  return out;
}

std::vector<nnspec::TapPoint> tap_points(const std::vector<std::string>& ids) {
  std::vector<nnspec::TapPoint> out;
  for (const auto& id : ids) out.push_back({id});
  return out;
}

}  // namespace

extern "C" {

const char* nnspec_version(void) { return "0.1.0"; }

const char* nnspec_last_error(void) { return g_last_error.c_str(); }

const char* nnspec_status_name(nnspec_status status) {
  switch (status) {
    case NNSPEC_OK: return "ok";
    case NNSPEC_ERR_ARGUMENT: return "argument error";
    case NNSPEC_ERR_IO: return "io error";
    case NNSPEC_ERR_FORMAT: return "format error";
    case NNSPEC_ERR_VALIDATION: return "validation error";
    case NNSPEC_ERR_SHAPE: return "shape error";
    case NNSPEC_ERR_NUMERIC: return "numeric error";
    case NNSPEC_ERR_TOPOLOGY: return "topology error";
    case NNSPEC_ERR_DOMAIN: return "domain error";
    case NNSPEC_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

const char* nnspec_tap_position(void) { return nnspec::kTapPosition.data(); }

nnspec_status nnspec_model_load(const char* manifest_path, nnspec_model** out) {
  return guard([&] {
    require("nnspec_model_load", manifest_path, out);
    *out = nullptr;
    *out = new nnspec_model{nnspec::load_model(manifest_path), {}};
  });
}

void nnspec_model_free(nnspec_model* model) { delete model; }

nnspec_status nnspec_model_name(const nnspec_model* model, const char** out) {
  return guard([&] {
    require("nnspec_model_name", model, out);
    *out = model->graph.name().c_str();
  });
}

nnspec_status nnspec_model_class_count(const nnspec_model* model, size_t* out) {
  return guard([&] {
    require("nnspec_model_class_count", model, out);
    *out = model->graph.class_count();
  });
}

nnspec_status nnspec_model_weighted_count(const nnspec_model* model, size_t* out) {
  return guard([&] {
    require("nnspec_model_weighted_count", model, out);
    *out = model->graph.weighted_layer_ids().size();
  });
}

nnspec_status nnspec_model_weighted_id(const nnspec_model* model, size_t index,
                                       const char** out) {
  return guard([&] {
    require("nnspec_model_weighted_id", model, out);
    std::size_t seen = 0;
    for (const auto& layer : model->graph.layers()) {
      if (!layer.weighted()) continue;
      if (seen++ == index) {
        *out = layer.id.c_str();
        return;
      }
    }
    throw ArgumentError("weighted layer index " + std::to_string(index) + " out of range");
  });
}

nnspec_status nnspec_model_output_tap(nnspec_model* model, const char* layer_id,
                                      const char** out) {
  return guard([&] {
    require("nnspec_model_output_tap", model, layer_id, out);
    auto& slot = model->tap_cache["out:" + std::string(layer_id)];
    slot = nnspec::post_activation_tap(model->graph, layer_id);
    *out = slot.c_str();
  });
}

nnspec_status nnspec_model_input_tap(nnspec_model* model, const char* layer_id,
                                     const char** out) {
  return guard([&] {
    require("nnspec_model_input_tap", model, layer_id, out);
    auto& slot = model->tap_cache["in:" + std::string(layer_id)];
    slot = nnspec::input_tap(model->graph, layer_id);
    *out = slot.c_str();
  });
}

nnspec_status nnspec_model_tap_index(const nnspec_model* model, const char* tap, size_t* out) {
  return guard([&] {
    require("nnspec_model_tap_index", model, tap, out);
    *out = model->graph.node_of(tap);
  });
}

nnspec_status nnspec_model_is_block_boundary(const nnspec_model* model, const char* tap,
                                             int* out) {
  return guard([&] {
    require("nnspec_model_is_block_boundary", model, tap, out);
    *out = nnspec::is_block_boundary(model->graph, model->graph.node_of(tap)) ? 1 : 0;
  });
}

nnspec_status nnspec_dataset_load(const char* path, nnspec_dataset** out) {
  return guard([&] {
    require("nnspec_dataset_load", path, out);
    *out = nullptr;
    *out = new nnspec_dataset{nnspec::load_dataset(path)};
  });
}

void nnspec_dataset_free(nnspec_dataset* dataset) { delete dataset; }

nnspec_status nnspec_dataset_count(const nnspec_dataset* dataset, size_t* out) {
  return guard([&] {
    require("nnspec_dataset_count", dataset, out);
    *out = dataset->blob.count;
  });
}

nnspec_status nnspec_dataset_has_labels(const nnspec_dataset* dataset, int* out) {
  return guard([&] {
    require("nnspec_dataset_has_labels", dataset, out);
    *out = dataset->blob.labels.has_value() ? 1 : 0;
  });
}

nnspec_status nnspec_dataset_labels(const nnspec_dataset* dataset, int* out, size_t len) {
  return guard([&] {
    require("nnspec_dataset_labels", dataset, out);
    if (!dataset->blob.labels)
      throw nnspec::ValidationError("dataset '" + dataset->blob.name + "' has no labels");
    require_len("nnspec_dataset_labels", len, dataset->blob.count);
    std::copy(dataset->blob.labels->begin(), dataset->blob.labels->end(), out);
  });
}

nnspec_status nnspec_dataset_subset(const nnspec_dataset* dataset, const size_t* indices,
                                    size_t count, nnspec_dataset** out) {
  return guard([&] {
    require("nnspec_dataset_subset", dataset, indices, out);
    *out = nullptr;
    *out = new nnspec_dataset{dataset->blob.subset({indices, count})};
  });
}

nnspec_status nnspec_sample_indices(size_t population, size_t count, uint64_t seed,
                                    size_t* out) {
  return guard([&] {
    require("nnspec_sample_indices", out);
    const auto ids = nnspec::sample_without_replacement(population, count, seed);
    std::copy(ids.begin(), ids.end(), out);
  });
}

uint64_t nnspec_derive_seed(uint64_t root, uint64_t stream) {
  return nnspec::derive_seed(root, stream);
}

nnspec_status nnspec_weight_stable_rank(const nnspec_model* model, const char* layer_id,
                                        double* out) {
  return guard([&] {
    require("nnspec_weight_stable_rank", model, layer_id, out);
    *out = nnspec::stable_rank(nnspec::weight_matrix(model->graph, layer_id));
  });
}

nnspec_status nnspec_parameter_census(const nnspec_model* model, double epsilon,
                                      uint64_t* kept, uint64_t* total) {
  return guard([&] {
    require("nnspec_parameter_census", model, kept, total);
    const auto c = nnspec::parameter_census(model->graph, epsilon);
    *kept = c.kept;
    *total = c.total;
  });
}

nnspec_status nnspec_features_compute(const nnspec_model* model, const nnspec_dataset* dataset,
                                      const char* const* taps, size_t tap_count,
                                      size_t batch_size, nnspec_features** out) {
  return guard([&] {
    require("nnspec_features_compute", model, dataset, out);
    if (tap_count) require("nnspec_features_compute", taps);
    *out = nullptr;
    const auto ids = tap_list(taps, tap_count);
    const auto points = tap_points(ids);
    nnspec::ForwardOptions opts;
    if (batch_size) opts.batch_size = batch_size;
    auto f = std::make_unique<nnspec_features>();
    f->result = nnspec::forward(model->graph, dataset->blob, points, opts);
    for (std::size_t i = 0; i < ids.size(); ++i) f->index.emplace(ids[i], i);
    *out = f.release();
  });
}

void nnspec_features_free(nnspec_features* features) { delete features; }

nnspec_status nnspec_features_logits(const nnspec_features* features, const float** data,
                                     size_t* rows, size_t* cols) {
  return guard([&] {
    require("nnspec_features_logits", features, data, rows, cols);
    const auto& l = features->result.logits;
    *data = l.data().data();
    *rows = l.dim(0);
    *cols = l.dim(1);
  });
}

nnspec_status nnspec_forward_truncated(const nnspec_model* model, double epsilon,
                                       const nnspec_dataset* dataset, size_t batch_size,
                                       float* out, size_t len) {
  return guard([&] {
    require("nnspec_forward_truncated", model, dataset, out);
    require_len("nnspec_forward_truncated", len,
                dataset->blob.count * model->graph.class_count());
    nnspec::ForwardOptions opts;
    if (batch_size) opts.batch_size = batch_size;
    const auto logits = nnspec::forward_truncated(model->graph, epsilon, dataset->blob, opts);
    std::copy(logits.data().begin(), logits.data().end(), out);
  });
}

nnspec_status nnspec_max_softmax(const float* logits, size_t rows, size_t cols, double* out) {
  return guard([&] {
    require("nnspec_max_softmax", logits, out);
    const auto s = nnspec::max_softmax(logits_tensor(logits, rows, cols));
    if (s.excluded_count != 0) throw nnspec::NumericError("max_softmax: non-finite logits");
    write_per_sample(s.scores, out);
  });
}

nnspec_status nnspec_prediction_rates(const float* logits, size_t rows, size_t cols,
                                      double* out) {
  return guard([&] {
    require("nnspec_prediction_rates", logits, out);
    const auto r = nnspec::prediction_rates(logits_tensor(logits, rows, cols));
    std::copy(r.begin(), r.end(), out);
  });
}

nnspec_status nnspec_accuracy(const float* logits, size_t rows, size_t cols, const int* labels,
                              double* out) {
  return guard([&] {
    require("nnspec_accuracy", logits, labels, out);
    const auto p = nnspec::predictions(logits_tensor(logits, rows, cols));
    std::size_t hits = 0;
    for (std::size_t i = 0; i < rows; ++i)
      if (labels[i] >= 0 && p[i] == static_cast<std::size_t>(labels[i])) ++hits;
    *out = static_cast<double>(hits) / static_cast<double>(rows);
  });
}

nnspec_status nnspec_coefficient_of_variation(const double* rates, size_t count, double* out) {
  return guard([&] {
    require("nnspec_coefficient_of_variation", rates, out);
    *out = nnspec::coefficient_of_variation({rates, count});
  });
}

nnspec_status nnspec_auroc(const double* id, size_t id_count, const double* ood,
                           size_t ood_count, nnspec_orientation orientation, double* out) {
  return guard([&] {
    require("nnspec_auroc", id, ood, out);
    const auto a = finite_only(id, id_count);
    const auto b = finite_only(ood, ood_count);
    *out = nnspec::auroc(a, b,
                         orientation == NNSPEC_HIGHER_IS_ID ? nnspec::Orientation::higher_is_id
                                                            : nnspec::Orientation::higher_is_ood);
  });
}

nnspec_status nnspec_quantile_summary(const double* values, size_t count,
                                      nnspec_quantiles* out) {
  return guard([&] {
    require("nnspec_quantile_summary", values, out);
    const auto v = finite_only(values, count);
    const auto q = nnspec::quantile_summary(v);
    *out = {q.median, q.q25, q.q75};
  });
}

nnspec_status nnspec_covariance_fit(const nnspec_model* model,
                                    const nnspec_features* train_features,
                                    const nnspec_dataset* train, const char* tap,
                                    nnspec_covariance** out) {
  return guard([&] {
    require("nnspec_covariance_fit", model, train_features, train, tap, out);
    *out = nullptr;
    const auto& blob = train->blob;
    if (!blob.labels)
      throw nnspec::ValidationError("covariance fit: dataset '" + blob.name + "' has no labels");
    blob.check_labels(model->graph.class_count());
    const auto& fb = train_features->at(tap);
    if (fb.pixel_avg.dim(0) != blob.count)
      throw nnspec::ValidationError("covariance fit: features hold " +
                                    std::to_string(fb.pixel_avg.dim(0)) + " samples, dataset '" +
                                    blob.name + "' has " + std::to_string(blob.count));
    *out = new nnspec_covariance{nnspec::fit_covariance(nnspec::to_matrix(fb.pixel_avg),
                                                        *blob.labels,
                                                        model->graph.class_count(), fb.tap)};
  });
}

void nnspec_covariance_free(nnspec_covariance* cov) { delete cov; }

nnspec_status nnspec_covariance_save(const nnspec_covariance* cov, const char* dir) {
  return guard([&] {
    require("nnspec_covariance_save", cov, dir);
    nnspec::save_covariance(cov->bundle, dir);
  });
}

nnspec_status nnspec_covariance_load(const char* dir, nnspec_covariance** out) {
  return guard([&] {
    require("nnspec_covariance_load", dir, out);
    *out = nullptr;
    *out = new nnspec_covariance{nnspec::load_covariance(dir)};
  });
}

nnspec_status nnspec_covariance_tap(const nnspec_covariance* cov, const char** out) {
  return guard([&] {
    require("nnspec_covariance_tap", cov, out);
    *out = cov->bundle.tap.layer_id.c_str();
  });
}

nnspec_status nnspec_covariance_stable_rank(const nnspec_covariance* cov, double* out) {
  return guard([&] {
    require("nnspec_covariance_stable_rank", cov, out);
    *out = nnspec::stable_rank(cov->bundle.tied_cov);
  });
}

nnspec_status nnspec_mahalanobis(const nnspec_covariance* cov, const nnspec_features* features,
                                 double* out, size_t len) {
  return guard([&] {
    require("nnspec_mahalanobis", cov, features, out);
    const auto& fb = features->at(cov->bundle.tap.layer_id);
    const auto x = nnspec::to_matrix(fb.pixel_avg);
    require_len("nnspec_mahalanobis", len, static_cast<std::size_t>(x.rows()));
    const auto scores = nnspec::mahalanobis(cov->bundle, x);
    // Mahalanobis distances are finite for finite features, so scores align
    // with rows unless something was excluded.
    if (scores.excluded_count != 0)
      throw nnspec::NumericError("mahalanobis: " + std::to_string(scores.excluded_count) +
                                 " non-finite scores");
    write_per_sample(scores.scores, out);
  });
}

nnspec_status nnspec_projection_scores(const nnspec_model* model, const char* layer_id,
                                       double epsilon, const nnspec_features* features,
                                       double* norm_out, double* ratio_out, size_t len) {
  return guard([&] {
    require("nnspec_projection_scores", model, layer_id, features, norm_out, ratio_out);
    const auto& fb = features->at(nnspec::input_tap(model->graph, layer_id));
    require_len("nnspec_projection_scores", len, fb.activations.dim(0));
    const auto basis =
        nnspec::projection_basis(nnspec::conv_local_operator(model->graph, layer_id), epsilon);
    const std::size_t b = fb.activations.dim(0);
    const auto all = nnspec::projection_scores(basis, fb.activations);
    if (all.ratio.excluded_count == 0 && all.norm.excluded_count == 0) {
      write_per_sample(all.norm.scores, norm_out);
      write_per_sample(all.ratio.scores, ratio_out);
      return;
    }
    // Rescore one sample at a time so excluded slots stay aligned.
    for (std::size_t i = 0; i < b; ++i) {
      auto one = fb.activations.slice0(i);
      auto dims = one.dims();
      dims.insert(dims.begin(), 1);
      const auto s = nnspec::projection_scores(basis, one.reshaped(dims));
      norm_out[i] = s.norm.scores.empty() ? std::numeric_limits<double>::quiet_NaN()
                                          : s.norm.scores[0];
      ratio_out[i] = s.ratio.scores.empty() ? std::numeric_limits<double>::quiet_NaN()
                                            : s.ratio.scores[0];
    }
  });
}

nnspec_status nnspec_cka_grid_compute(const nnspec_model* model, const nnspec_dataset* dataset,
                                      const char* const* taps, size_t tap_count,
                                      size_t sample_count, uint64_t seed, size_t batch_size,
                                      nnspec_cka_grid** out) {
  return guard([&] {
    require("nnspec_cka_grid_compute", model, dataset, taps, out);
    *out = nullptr;
    const auto points = tap_points(tap_list(taps, tap_count));
    nnspec::ForwardOptions opts;
    if (batch_size) opts.batch_size = batch_size;
    *out = new nnspec_cka_grid{
        nnspec::cka_grid(model->graph, dataset->blob, points, sample_count, seed, opts)};
  });
}

void nnspec_cka_grid_free(nnspec_cka_grid* grid) { delete grid; }

nnspec_status nnspec_cka_grid_size(const nnspec_cka_grid* grid, size_t* out) {
  return guard([&] {
    require("nnspec_cka_grid_size", grid, out);
    *out = grid->grid.taps.size();
  });
}

nnspec_status nnspec_cka_grid_cell(const nnspec_cka_grid* grid, size_t row, size_t col,
                                   nnspec_similarity* out) {
  return guard([&] {
    require("nnspec_cka_grid_cell", grid, out);
    const std::size_t n = grid->grid.taps.size();
    if (row >= n || col >= n) throw ArgumentError("cka grid cell out of range");
    const auto& c = grid->grid.cells[row][col];
    *out = {c.cka, c.lr, c.cca, c.cka_matrix_stable_rank, c.gram_dims_a, c.gram_dims_b,
            c.cka_dims};
  });
}

nnspec_status nnspec_cka_grid_csv(const nnspec_cka_grid* grid, char* buffer, size_t capacity,
                                  size_t* needed) {
  return guard([&] {
    require("nnspec_cka_grid_csv", grid, needed);
    const std::string text = nnspec::grid_csv(grid->grid);
    *needed = text.size() + 1;
    if (!buffer) return;
    require_len("nnspec_cka_grid_csv", capacity, text.size() + 1);
    std::memcpy(buffer, text.c_str(), text.size() + 1);
  });
}

nnspec_status nnspec_sensitivity_compute(const nnspec_model* model, const nnspec_dataset* dataset,
                                         const char* inject, const char* const* observe,
                                         size_t observe_count, double noise_norm, uint64_t seed,
                                         const size_t* indices, size_t index_count,
                                         size_t batch_size, nnspec_sensitivity** out) {
  return guard([&] {
    require("nnspec_sensitivity_compute", model, dataset, inject, observe, out);
    *out = nullptr;
    const auto points = tap_points(tap_list(observe, observe_count));
    nnspec::ForwardOptions opts;
    if (batch_size) opts.batch_size = batch_size;
    if (indices) {
      for (std::size_t i = 0; i < index_count; ++i)
        if (indices[i] >= dataset->blob.count)
          throw ArgumentError("sample index " + std::to_string(indices[i]) + " out of range");
      opts.indices = {indices, index_count};
    }
    *out = new nnspec_sensitivity{nnspec::noise_sensitivity(
        model->graph, dataset->blob, {inject}, points, noise_norm, seed, opts)};
  });
}

void nnspec_sensitivity_free(nnspec_sensitivity* s) { delete s; }

nnspec_status nnspec_sensitivity_summary(const nnspec_sensitivity* s, size_t k,
                                         nnspec_quantiles* out, size_t* count,
                                         size_t* excluded) {
  return guard([&] {
    require("nnspec_sensitivity_summary", s, out, count, excluded);
    if (k >= s->reports.size()) throw ArgumentError("sensitivity report index out of range");
    const auto& r = s->reports[k];
    *out = {r.median, r.q25, r.q75};
    *count = r.per_sample_psi.size();
    *excluded = r.excluded;
  });
}

nnspec_status nnspec_sensitivity_values(const nnspec_sensitivity* s, size_t k,
                                        const double** data, size_t* count) {
  return guard([&] {
    require("nnspec_sensitivity_values", s, data, count);
    if (k >= s->reports.size()) throw ArgumentError("sensitivity report index out of range");
    *data = s->reports[k].per_sample_psi.data();
    *count = s->reports[k].per_sample_psi.size();
  });
}

nnspec_status nnspec_sensitivity_auroc(const nnspec_sensitivity* id, size_t id_k,
                                       const nnspec_sensitivity* ood, size_t ood_k,
                                       double* out) {
  return guard([&] {
    require("nnspec_sensitivity_auroc", id, ood, out);
    if (id_k >= id->reports.size() || ood_k >= ood->reports.size())
      throw ArgumentError("sensitivity report index out of range");
    *out = nnspec::sensitivity_auroc(id->reports[id_k], ood->reports[ood_k]);
  });
}

}  // extern "C"
