// nnspec command-line front end. Talks to the library only through the C API.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "nnspec/nnspec.h"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInternal = 1;
constexpr int kExitValidation = 2;
constexpr int kExitNumeric = 3;

struct CliError {
  int code;
  std::string message;
};

[[noreturn]] void fail_validation(const std::string& msg) { throw CliError{kExitValidation, msg}; }

void check(nnspec_status s, const std::string& what) {
  if (s == NNSPEC_OK) return;
  const int code = s == NNSPEC_ERR_NUMERIC    ? kExitNumeric
                   : s == NNSPEC_ERR_INTERNAL ? kExitInternal
                                              : kExitValidation;
  throw CliError{code, what + ": " + nnspec_status_name(s) + ": " + nnspec_last_error()};
}

template <class T, void (*Free)(T*)>
struct Deleter {
  void operator()(T* p) const { Free(p); }
};
using Model = std::unique_ptr<nnspec_model, Deleter<nnspec_model, nnspec_model_free>>;
using Dataset = std::unique_ptr<nnspec_dataset, Deleter<nnspec_dataset, nnspec_dataset_free>>;
using Features = std::unique_ptr<nnspec_features, Deleter<nnspec_features, nnspec_features_free>>;
using Covariance =
    std::unique_ptr<nnspec_covariance, Deleter<nnspec_covariance, nnspec_covariance_free>>;
using Grid = std::unique_ptr<nnspec_cka_grid, Deleter<nnspec_cka_grid, nnspec_cka_grid_free>>;
using Sensitivity =
    std::unique_ptr<nnspec_sensitivity, Deleter<nnspec_sensitivity, nnspec_sensitivity_free>>;

// ---- configuration ----

struct NamedPath {
  std::string name;
  fs::path path;
};

struct RunConfig {
  std::vector<fs::path> models;
  std::optional<fs::path> train;
  std::optional<NamedPath> id;
  std::vector<NamedPath> ood;
  std::vector<std::string> taps;  // weighted layer ids; empty means all
  std::uint64_t seed = 0;
  double epsilon = 1e-2;
  std::vector<double> epsilons{0.0, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1};
  std::size_t eval_samples = 10000;
  std::size_t train_samples = 0;  // 0 means all
  std::size_t gram_samples = 10000;
  std::size_t sensitivity_samples = 10000;
  double noise_norm = 0.1;
  std::size_t batch_size = 256;
  std::optional<fs::path> covariance_dir;
  std::optional<std::string> projection_layer;
  fs::path out = "results";
  std::string hash;
};

struct Overrides {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string method = "all";
  std::optional<double> epsilon;
  std::string taps;
};

std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

fs::path existing(const fs::path& base, const json& value, const std::string& key) {
  if (!value.is_string()) fail_validation("config: '" + key + "' must be a path string");
  fs::path p = value.get<std::string>();
  if (p.is_relative()) p = base / p;
  if (!fs::exists(p)) fail_validation("config: '" + key + "' refers to missing path " + p.string());
  return p;
}

template <class T>
T number(const json& doc, const char* key, T fallback) {
  if (!doc.contains(key)) return fallback;
  const json& v = doc[key];
  if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) fail_validation(std::string("config: '") + key + "' must be a number");
    return v.get<T>();
  } else {
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0))
      fail_validation(std::string("config: '") + key + "' must be a nonnegative integer");
    return v.get<T>();
  }
}

RunConfig load_config(const Overrides& o) {
  if (o.config.empty()) fail_validation("--config is required");
  std::ifstream in(o.config);
  if (!in) fail_validation("cannot open config '" + o.config + "'");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    fail_validation(std::string("config is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) fail_validation("config root must be an object");
  const fs::path base = fs::path(o.config).parent_path();

  RunConfig c;
  try {
    if (doc.contains("models")) {
      if (!doc["models"].is_array() || doc["models"].empty())
        fail_validation("config: 'models' must be a non-empty array");
      for (const auto& m : doc["models"]) c.models.push_back(existing(base, m, "models"));
    } else if (doc.contains("model")) {
      c.models.push_back(existing(base, doc["model"], "model"));
    } else {
      fail_validation("config: 'model' or 'models' is required");
    }
    if (doc.contains("train")) c.train = existing(base, doc["train"], "train");
    if (doc.contains("id")) c.id = NamedPath{"id", existing(base, doc["id"], "id")};
    if (doc.contains("ood")) {
      if (!doc["ood"].is_object()) fail_validation("config: 'ood' must map names to paths");
      for (const auto& [name, p] : doc["ood"].items())
        c.ood.push_back({name, existing(base, p, "ood." + name)});
    }
    if (doc.contains("taps")) {
      const json& t = doc["taps"];
      if (t.is_string()) {
        if (t.get<std::string>() != "all") c.taps = split_csv(t.get<std::string>());
      } else if (t.is_array()) {
        for (const auto& v : t) c.taps.push_back(v.get<std::string>());
      } else {
        fail_validation("config: 'taps' must be \"all\" or a list of layer ids");
      }
    }
    c.seed = number<std::uint64_t>(doc, "seed", 0);
    c.epsilon = number<double>(doc, "epsilon", c.epsilon);
    if (doc.contains("epsilons")) c.epsilons = doc["epsilons"].get<std::vector<double>>();
    if (doc.contains("samples")) {
      const json& s = doc["samples"];
      if (!s.is_object()) fail_validation("config: 'samples' must be an object");
      c.eval_samples = number<std::size_t>(s, "eval", c.eval_samples);
      c.train_samples = number<std::size_t>(s, "train", c.train_samples);
      c.gram_samples = number<std::size_t>(s, "gram", c.gram_samples);
      c.sensitivity_samples = number<std::size_t>(s, "sensitivity", c.sensitivity_samples);
    }
    c.noise_norm = number<double>(doc, "noise_norm", c.noise_norm);
    c.batch_size = number<std::size_t>(doc, "batch_size", c.batch_size);
    if (doc.contains("covariance_dir")) {
      fs::path p = doc["covariance_dir"].get<std::string>();
      c.covariance_dir = p.is_relative() ? base / p : p;
    }
    if (doc.contains("projection_layer"))
      c.projection_layer = doc["projection_layer"].get<std::string>();
    if (doc.contains("out")) {
      fs::path p = doc["out"].get<std::string>();
      c.out = p.is_relative() ? base / p : p;
    }
  } catch (const json::exception& e) {
    fail_validation(std::string("config: ") + e.what());
  }

  if (!o.out.empty()) c.out = o.out;
  if (o.seed) c.seed = *o.seed;
  if (o.epsilon) {
    c.epsilon = *o.epsilon;
    c.epsilons = {*o.epsilon};
  }
  if (!o.taps.empty() && o.taps != "all") c.taps = split_csv(o.taps);
  for (double e : c.epsilons)
    if (!(e >= 0.0 && e < 1.0)) fail_validation("epsilon values must lie in [0, 1)");
  if (!(c.epsilon >= 0.0 && c.epsilon < 1.0)) fail_validation("epsilon must lie in [0, 1)");
  if (!(c.noise_norm >= 0.0) || !std::isfinite(c.noise_norm))
    fail_validation("noise_norm must be finite and nonnegative");

  // The hash covers the file and every command-line override.
  json effective = doc;
  effective["__overrides"] = {{"out", o.out},
                              {"seed", o.seed ? json(*o.seed) : json(nullptr)},
                              {"method", o.method},
                              {"epsilon", o.epsilon ? json(*o.epsilon) : json(nullptr)},
                              {"taps", o.taps}};
  c.hash = fnv1a_hex(effective.dump());
  return c;
}

// ---- output ----

std::string fmt(double v, const char* spec = "%.6f") {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

class CsvFile {
 public:
  CsvFile(const RunConfig& c, const std::string& name, const std::string& header)
      : path_(c.out / name) {
    fs::create_directories(c.out);
    out_.open(path_, std::ios::trunc);
    if (!out_) fail_validation("cannot write " + path_.string());
    out_ << "# config_hash=" << c.hash << " seed=" << c.seed
         << " tap_position=" << nnspec_tap_position() << '\n'
         << header << '\n';
  }
  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
    out_ << '\n';
  }
  ~CsvFile() { std::cerr << "wrote " << path_.string() << '\n'; }

 private:
  fs::path path_;
  std::ofstream out_;
};

// ---- helpers over the C API ----

struct LoadedModel {
  Model handle;
  std::string name;
  std::size_t classes = 0;
  std::vector<std::string> layers;  // weighted layers analysed by this run
  std::vector<std::string> all_layers;

  std::string output_tap(const std::string& layer) {
    const char* t = nullptr;
    check(nnspec_model_output_tap(handle.get(), layer.c_str(), &t), "layer '" + layer + "'");
    return t;
  }
  std::string input_tap(const std::string& layer) {
    const char* t = nullptr;
    check(nnspec_model_input_tap(handle.get(), layer.c_str(), &t), "layer '" + layer + "'");
    return t;
  }
};

LoadedModel load_model(const fs::path& path, const std::vector<std::string>& taps) {
  LoadedModel m;
  nnspec_model* raw = nullptr;
  check(nnspec_model_load(path.string().c_str(), &raw), "loading " + path.string());
  m.handle.reset(raw);
  const char* name = nullptr;
  check(nnspec_model_name(raw, &name), "model name");
  m.name = name;
  check(nnspec_model_class_count(raw, &m.classes), "class count");
  std::size_t n = 0;
  check(nnspec_model_weighted_count(raw, &n), "weighted layers");
  for (std::size_t i = 0; i < n; ++i) {
    const char* id = nullptr;
    check(nnspec_model_weighted_id(raw, i, &id), "weighted layers");
    m.all_layers.emplace_back(id);
  }
  if (taps.empty()) {
    m.layers = m.all_layers;
  } else {
    for (const auto& t : taps) {
      if (std::find(m.all_layers.begin(), m.all_layers.end(), t) == m.all_layers.end())
        fail_validation("tap '" + t + "' is not a weighted layer of model '" + m.name + "'");
      m.layers.push_back(t);
    }
  }
  return m;
}

std::vector<LoadedModel> load_models(const RunConfig& c) {
  std::vector<LoadedModel> out;
  for (const auto& p : c.models) out.push_back(load_model(p, c.taps));
  return out;
}

Dataset load_dataset(const fs::path& path) {
  nnspec_dataset* raw = nullptr;
  check(nnspec_dataset_load(path.string().c_str(), &raw), "loading " + path.string());
  return Dataset(raw);
}

std::size_t dataset_count(const nnspec_dataset* d) {
  std::size_t n = 0;
  check(nnspec_dataset_count(d, &n), "dataset size");
  return n;
}

// Seeded subsample of `limit` samples (all when limit is 0 or covers the set).
Dataset load_subset(const fs::path& path, std::size_t limit, std::uint64_t seed) {
  Dataset full = load_dataset(path);
  const std::size_t n = dataset_count(full.get());
  if (limit == 0 || limit >= n) return full;
  std::vector<std::size_t> idx(limit);
  check(nnspec_sample_indices(n, limit, seed, idx.data()), "subsampling " + path.string());
  nnspec_dataset* raw = nullptr;
  check(nnspec_dataset_subset(full.get(), idx.data(), idx.size(), &raw), "subsampling");
  return Dataset(raw);
}

// Random streams derived from the root seed, one per role.
enum Stream : std::uint64_t { kTrainStream = 1, kIdStream = 2, kOodStream = 16, kNoiseStream = 64 };

struct EvalSets {
  Dataset id;
  std::vector<std::pair<std::string, Dataset>> ood;
};

EvalSets load_eval_sets(const RunConfig& c) {
  if (!c.id) fail_validation("config: 'id' dataset is required");
  if (c.ood.empty()) fail_validation("config: at least one 'ood' dataset is required");
  EvalSets s;
  s.id = load_subset(c.id->path, c.eval_samples, nnspec_derive_seed(c.seed, kIdStream));
  for (std::size_t k = 0; k < c.ood.size(); ++k)
    s.ood.emplace_back(c.ood[k].name, load_subset(c.ood[k].path, c.eval_samples,
                                                  nnspec_derive_seed(c.seed, kOodStream + k)));
  return s;
}

Dataset load_train(const RunConfig& c) {
  if (!c.train) fail_validation("config: 'train' dataset is required for covariance fits");
  Dataset d = load_subset(*c.train, c.train_samples, nnspec_derive_seed(c.seed, kTrainStream));
  int labelled = 0;
  check(nnspec_dataset_has_labels(d.get(), &labelled), "train labels");
  if (!labelled) fail_validation("train dataset " + c.train->string() + " has no labels");
  return d;
}

Features compute(const LoadedModel& m, const nnspec_dataset* d,
                 const std::vector<std::string>& taps, const RunConfig& c) {
  std::vector<const char*> ptrs;
  for (const auto& t : taps) ptrs.push_back(t.c_str());
  nnspec_features* raw = nullptr;
  check(nnspec_features_compute(m.handle.get(), d, ptrs.data(), ptrs.size(), c.batch_size, &raw),
        "forward pass of model '" + m.name + "'");
  return Features(raw);
}

struct LogitView {
  const float* data = nullptr;
  std::size_t rows = 0, cols = 0;
};

LogitView logits(const Features& f) {
  LogitView v;
  check(nnspec_features_logits(f.get(), &v.data, &v.rows, &v.cols), "logits");
  return v;
}

double auroc(const std::vector<double>& id, const std::vector<double>& ood,
             nnspec_orientation o) {
  double a = 0.0;
  check(nnspec_auroc(id.data(), id.size(), ood.data(), ood.size(), o, &a), "auroc");
  return a;
}

nnspec_quantiles summarize(const std::vector<double>& v) {
  nnspec_quantiles q{};
  check(nnspec_quantile_summary(v.data(), v.size(), &q), "quantile summary");
  return q;
}

double error_bar(const nnspec_quantiles& q) {
  return 0.5 * (std::abs(q.median - q.q25) + std::abs(q.q75 - q.median));
}

std::size_t count_nan(const std::vector<double>& v) {
  return static_cast<std::size_t>(std::count_if(v.begin(), v.end(), [](double x) { return std::isnan(x); }));
}

std::vector<std::string> output_taps(LoadedModel& m, const std::vector<std::string>& layers) {
  std::vector<std::string> taps;
  for (const auto& l : layers) taps.push_back(m.output_tap(l));
  return taps;
}

std::vector<std::string> unique(std::vector<std::string> v) {
  std::vector<std::string> out;
  for (auto& s : v)
    if (std::find(out.begin(), out.end(), s) == out.end()) out.push_back(std::move(s));
  return out;
}

Covariance fit_or_load(const RunConfig& c, std::size_t model_index, LoadedModel& m,
                       const Features& train_features, const nnspec_dataset* train,
                       const std::string& tap) {
  nnspec_covariance* raw = nullptr;
  std::optional<fs::path> dir;
  if (c.covariance_dir)
    dir = *c.covariance_dir / ("m" + std::to_string(model_index) + "_" + m.name) / tap;
  if (dir && fs::exists(*dir / "bundle.json")) {
    check(nnspec_covariance_load(dir->string().c_str(), &raw), "loading covariance " + dir->string());
    const char* stored = nullptr;
    check(nnspec_covariance_tap(raw, &stored), "covariance tap");
    if (stored != tap) {
      nnspec_covariance_free(raw);
      fail_validation("covariance bundle at " + dir->string() + " belongs to tap '" + stored + "'");
    }
    return Covariance(raw);
  }
  check(nnspec_covariance_fit(m.handle.get(), train_features.get(), train, tap.c_str(), &raw),
        "covariance fit at tap '" + tap + "'");
  Covariance cov(raw);
  if (dir) check(nnspec_covariance_save(cov.get(), dir->string().c_str()), "saving covariance");
  return cov;
}

// ---- commands ----

void cmd_stable_rank(const RunConfig& c) {
  auto models = load_models(c);
  Dataset train = load_train(c);
  // per layer: weight ranks and covariance ranks across models
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> acc;
  std::vector<std::string> order;
  std::map<std::string, std::string> tap_of;
  for (std::size_t mi = 0; mi < models.size(); ++mi) {
    auto& m = models[mi];
    const auto taps = unique(output_taps(m, m.layers));
    Features tf = compute(m, train.get(), taps, c);
    for (const auto& layer : m.layers) {
      double wr = 0.0, cr = 0.0;
      check(nnspec_weight_stable_rank(m.handle.get(), layer.c_str(), &wr),
            "stable rank of layer '" + layer + "'");
      const std::string tap = m.output_tap(layer);
      Covariance cov = fit_or_load(c, mi, m, tf, train.get(), tap);
      check(nnspec_covariance_stable_rank(cov.get(), &cr), "covariance stable rank at '" + tap + "'");
      if (!acc.count(layer)) order.push_back(layer);
      acc[layer].first.push_back(wr);
      acc[layer].second.push_back(cr);
      tap_of[layer] = tap;
    }
  }
  CsvFile csv(c, "stable_rank.csv",
              "layer,tap,weight_stable_rank,weight_error_bar,cov_stable_rank,cov_error_bar,models");
  for (const auto& layer : order) {
    const auto w = summarize(acc[layer].first);
    const auto v = summarize(acc[layer].second);
    csv.row({layer, tap_of[layer], fmt(w.median), fmt(error_bar(w)), fmt(v.median),
             fmt(error_bar(v)), std::to_string(acc[layer].first.size())});
  }
}

struct DetectKey {
  std::string method, score, layer, tap, ood;
  auto operator<=>(const DetectKey&) const = default;
};

struct DetectCell {
  std::vector<double> auroc;
  std::size_t id_n = 0, ood_n = 0, id_excluded = 0, ood_excluded = 0;
};

void cmd_detect(const RunConfig& c, const std::string& method) {
  const bool all = method == "all";
  const bool want_prob = all || method == "probability";
  const bool want_feat = all || method == "feature";
  const bool want_proj = all || method == "projection";
  if (!want_prob && !want_feat && !want_proj)
    fail_validation("--method must be probability, feature, projection or all");

  auto models = load_models(c);
  EvalSets sets = load_eval_sets(c);
  Dataset train;
  if (want_feat) train = load_train(c);

  std::map<DetectKey, DetectCell> cells;
  std::vector<DetectKey> order;
  auto record = [&](DetectKey key, const std::vector<double>& id, const std::vector<double>& ood,
                    nnspec_orientation o) {
    auto [it, fresh] = cells.try_emplace(key);
    if (fresh) order.push_back(key);
    it->second.auroc.push_back(auroc(id, ood, o));
    it->second.id_n = id.size() - count_nan(id);
    it->second.ood_n = ood.size() - count_nan(ood);
    it->second.id_excluded = count_nan(id);
    it->second.ood_excluded = count_nan(ood);
  };

  for (std::size_t mi = 0; mi < models.size(); ++mi) {
    auto& m = models[mi];
    std::vector<std::string> taps;
    if (want_feat) taps = output_taps(m, m.layers);
    if (want_proj)
      for (const auto& l : m.layers) taps.push_back(m.input_tap(l));
    taps = unique(taps);

    Features idf = compute(m, sets.id.get(), taps, c);
    std::vector<Features> oodf;
    for (auto& [name, d] : sets.ood) oodf.push_back(compute(m, d.get(), taps, c));
    const std::size_t n_id = dataset_count(sets.id.get());

    auto per_sample = [](std::size_t n) { return std::vector<double>(n); };

    if (want_prob) {
      const auto lid = logits(idf);
      auto sid = per_sample(lid.rows);
      check(nnspec_max_softmax(lid.data, lid.rows, lid.cols, sid.data()), "max softmax");
      for (std::size_t k = 0; k < oodf.size(); ++k) {
        const auto lo = logits(oodf[k]);
        auto so = per_sample(lo.rows);
        check(nnspec_max_softmax(lo.data, lo.rows, lo.cols, so.data()), "max softmax");
        record({"probability", "probability", "logits", m.all_layers.back(), sets.ood[k].first},
               sid, so, NNSPEC_HIGHER_IS_ID);
      }
    }
    if (want_feat) {
      Features tf = compute(m, train.get(), unique(output_taps(m, m.layers)), c);
      for (const auto& layer : m.layers) {
        const std::string tap = m.output_tap(layer);
        Covariance cov = fit_or_load(c, mi, m, tf, train.get(), tap);
        auto sid = per_sample(n_id);
        check(nnspec_mahalanobis(cov.get(), idf.get(), sid.data(), sid.size()),
              "mahalanobis at '" + tap + "'");
        for (std::size_t k = 0; k < oodf.size(); ++k) {
          auto so = per_sample(dataset_count(sets.ood[k].second.get()));
          check(nnspec_mahalanobis(cov.get(), oodf[k].get(), so.data(), so.size()),
                "mahalanobis at '" + tap + "'");
          record({"feature", "feature", layer, tap, sets.ood[k].first}, sid, so,
                 NNSPEC_HIGHER_IS_OOD);
        }
      }
    }
    if (want_proj) {
      for (const auto& layer : m.layers) {
        const std::string tap = m.input_tap(layer);
        auto nid = per_sample(n_id), rid = per_sample(n_id);
        check(nnspec_projection_scores(m.handle.get(), layer.c_str(), c.epsilon, idf.get(),
                                       nid.data(), rid.data(), n_id),
              "projection at layer '" + layer + "'");
        for (std::size_t k = 0; k < oodf.size(); ++k) {
          const std::size_t n = dataset_count(sets.ood[k].second.get());
          auto no = per_sample(n), ro = per_sample(n);
          check(nnspec_projection_scores(m.handle.get(), layer.c_str(), c.epsilon,
                                         oodf[k].get(), no.data(), ro.data(), n),
                "projection at layer '" + layer + "'");
          record({"projection", "projection_norm", layer, tap, sets.ood[k].first}, nid, no,
                 NNSPEC_HIGHER_IS_ID);
          record({"projection", "projection_ratio", layer, tap, sets.ood[k].first}, rid, ro,
                 NNSPEC_HIGHER_IS_ID);
        }
      }
    }
  }

  CsvFile csv(c, "detect.csv",
              "method,score,layer,tap,ood,auroc,error_bar,models,id_samples,ood_samples,"
              "id_excluded,ood_excluded,epsilon");
  for (const auto& key : order) {
    const auto& cell = cells[key];
    const auto q = summarize(cell.auroc);
    csv.row({key.method, key.score, key.layer, key.tap, key.ood, fmt(q.median), fmt(error_bar(q)),
             std::to_string(cell.auroc.size()), std::to_string(cell.id_n),
             std::to_string(cell.ood_n), std::to_string(cell.id_excluded),
             std::to_string(cell.ood_excluded),
             key.method == "projection" ? fmt(c.epsilon, "%g") : std::string()});
  }
  CsvFile runs(c, "detect_runs.csv", "model,method,score,layer,ood,auroc");
  for (const auto& key : order)
    for (std::size_t mi = 0; mi < cells[key].auroc.size(); ++mi)
      runs.row({std::to_string(mi), key.method, key.score, key.layer, key.ood,
                fmt(cells[key].auroc[mi])});
}

void cmd_cka(const RunConfig& c) {
  auto models = load_models(c);
  if (!c.id) fail_validation("config: 'id' dataset is required");
  Dataset data = load_dataset(c.id->path);
  const std::size_t n = std::min(c.gram_samples, dataset_count(data.get()));
  const std::uint64_t gram_seed = nnspec_derive_seed(c.seed, kIdStream);

  CsvFile pairs(c, "cka_pairs.csv",
                "model,tap_a,tap_b,cka,lr,cca,cka_matrix_stable_rank,gram_dims_a,gram_dims_b,"
                "cka_dims,samples");
  std::map<std::string, std::vector<double>> slice;
  std::vector<std::string> slice_order;
  std::string penultimate;
  for (std::size_t mi = 0; mi < models.size(); ++mi) {
    auto& m = models[mi];
    std::vector<std::string> taps = output_taps(m, m.layers);
    penultimate = m.input_tap(m.all_layers.back());
    if (std::find(taps.begin(), taps.end(), penultimate) == taps.end()) taps.push_back(penultimate);
    taps = unique(taps);
    if (taps.size() < 2) fail_validation("cka needs at least two distinct taps");
    std::vector<const char*> ptrs;
    for (const auto& t : taps) ptrs.push_back(t.c_str());
    nnspec_cka_grid* raw = nullptr;
    check(nnspec_cka_grid_compute(m.handle.get(), data.get(), ptrs.data(), ptrs.size(), n,
                                  gram_seed, c.batch_size, &raw),
          "cka grid of model '" + m.name + "'");
    Grid grid(raw);

    std::size_t needed = 0;
    check(nnspec_cka_grid_csv(grid.get(), nullptr, 0, &needed), "cka csv");
    std::string text(needed, '\0');
    check(nnspec_cka_grid_csv(grid.get(), text.data(), text.size(), &needed), "cka csv");
    text.pop_back();
    const std::string name =
        models.size() == 1 ? "cka_grid.csv" : "cka_grid_m" + std::to_string(mi) + ".csv";
    {
      fs::create_directories(c.out);
      std::ofstream f(c.out / name, std::ios::trunc);
      if (!f) fail_validation("cannot write " + (c.out / name).string());
      f << "# config_hash=" << c.hash << " seed=" << c.seed << " gram_seed=" << gram_seed
        << " samples=" << n << " tap_position=" << nnspec_tap_position() << '\n'
        << text;
      std::cerr << "wrote " << (c.out / name).string() << '\n';
    }

    const std::size_t pen = static_cast<std::size_t>(
        std::find(taps.begin(), taps.end(), penultimate) - taps.begin());
    for (std::size_t i = 0; i < taps.size(); ++i) {
      for (std::size_t j = 0; j < taps.size(); ++j) {
        nnspec_similarity s{};
        check(nnspec_cka_grid_cell(grid.get(), i, j, &s), "cka cell");
        pairs.row({std::to_string(mi), taps[i], taps[j], fmt(s.cka), fmt(s.lr), fmt(s.cca),
                   fmt(s.cka_matrix_stable_rank), std::to_string(s.gram_dims_a),
                   std::to_string(s.gram_dims_b), std::to_string(s.cka_dims), std::to_string(n)});
        if (j == pen) {
          if (!slice.count(taps[i])) slice_order.push_back(taps[i]);
          slice[taps[i]].push_back(s.cka);
        }
      }
    }
  }
  CsvFile pen(c, "cka_penultimate.csv", "tap,penultimate_tap,cka,error_bar,models");
  for (const auto& t : slice_order) {
    const auto q = summarize(slice[t]);
    pen.row({t, penultimate, fmt(q.median), fmt(error_bar(q)), std::to_string(slice[t].size())});
  }
}

void cmd_sensitivity(const RunConfig& c) {
  auto models = load_models(c);
  if (!c.id) fail_validation("config: 'id' dataset is required");
  std::vector<std::pair<std::string, Dataset>> sets;
  sets.emplace_back(c.id->name, load_subset(c.id->path, c.sensitivity_samples,
                                            nnspec_derive_seed(c.seed, kIdStream)));
  for (std::size_t k = 0; k < c.ood.size(); ++k)
    sets.emplace_back(c.ood[k].name,
                      load_subset(c.ood[k].path, c.sensitivity_samples,
                                  nnspec_derive_seed(c.seed, kOodStream + k)));

  CsvFile csv(c, "sensitivity.csv",
              "model,dataset,inject,observe,median,q25,q75,error_bar,samples,excluded,noise_norm");
  CsvFile auc(c, "sensitivity_auroc.csv", "model,inject,observe,ood,auroc");
  for (std::size_t mi = 0; mi < models.size(); ++mi) {
    auto& m = models[mi];
    const auto taps = unique(output_taps(m, m.layers));
    for (std::size_t a = 0; a < taps.size(); ++a) {
      int boundary = 0;
      check(nnspec_model_is_block_boundary(m.handle.get(), taps[a].c_str(), &boundary),
            "tap '" + taps[a] + "'");
      if (!boundary) {
        std::cerr << "skipping inject tap '" << taps[a] << "': inside a residual skip span\n";
        continue;
      }
      std::vector<const char*> observe;
      for (std::size_t b = a; b < taps.size(); ++b) observe.push_back(taps[b].c_str());
      std::vector<Sensitivity> reports;
      for (std::size_t s = 0; s < sets.size(); ++s) {
        nnspec_sensitivity* raw = nullptr;
        check(nnspec_sensitivity_compute(m.handle.get(), sets[s].second.get(), taps[a].c_str(),
                                         observe.data(), observe.size(), c.noise_norm,
                                         nnspec_derive_seed(c.seed, kNoiseStream + s), nullptr, 0,
                                         c.batch_size, &raw),
              "sensitivity from '" + taps[a] + "'");
        reports.emplace_back(raw);
        for (std::size_t k = 0; k < observe.size(); ++k) {
          nnspec_quantiles q{};
          std::size_t count = 0, excluded = 0;
          check(nnspec_sensitivity_summary(raw, k, &q, &count, &excluded), "sensitivity summary");
          csv.row({std::to_string(mi), sets[s].first, taps[a], observe[k], fmt(q.median, "%.8g"),
                   fmt(q.q25, "%.8g"), fmt(q.q75, "%.8g"), fmt(error_bar(q), "%.8g"),
                   std::to_string(count), std::to_string(excluded), fmt(c.noise_norm, "%g")});
        }
      }
      for (std::size_t s = 1; s < sets.size(); ++s) {
        for (std::size_t k = 0; k < observe.size(); ++k) {
          double v = 0.0;
          check(nnspec_sensitivity_auroc(reports[0].get(), k, reports[s].get(), k, &v),
                "sensitivity auroc");
          auc.row({std::to_string(mi), taps[a], observe[k], sets[s].first, fmt(v)});
        }
      }
    }
  }
}

void cmd_compress(const RunConfig& c) {
  auto models = load_models(c);
  EvalSets sets = load_eval_sets(c);
  const std::size_t n_id = dataset_count(sets.id.get());
  std::vector<int> labels(n_id);
  check(nnspec_dataset_labels(sets.id.get(), labels.data(), labels.size()),
        "labels of the id dataset");

  CsvFile csv(c, "compress.csv",
              "model,epsilon,kept_params,total_params,kept_ratio,accuracy");
  CsvFile auc(c, "compress_auroc.csv", "model,epsilon,layer,score,ood,auroc");
  for (std::size_t mi = 0; mi < models.size(); ++mi) {
    auto& m = models[mi];
    const std::string layer = c.projection_layer.value_or(m.all_layers.back());
    if (std::find(m.all_layers.begin(), m.all_layers.end(), layer) == m.all_layers.end())
      fail_validation("projection_layer '" + layer + "' is not a weighted layer");
    const std::vector<std::string> taps{m.input_tap(layer)};
    Features idf = compute(m, sets.id.get(), taps, c);
    std::vector<Features> oodf;
    for (auto& [name, d] : sets.ood) oodf.push_back(compute(m, d.get(), taps, c));

    for (double eps : c.epsilons) {
      std::uint64_t kept = 0, total = 0;
      check(nnspec_parameter_census(m.handle.get(), eps, &kept, &total), "parameter census");
      std::vector<float> out(n_id * m.classes);
      check(nnspec_forward_truncated(m.handle.get(), eps, sets.id.get(), c.batch_size, out.data(),
                                     out.size()),
            "truncated forward at epsilon " + fmt(eps, "%g"));
      double acc = 0.0;
      check(nnspec_accuracy(out.data(), n_id, m.classes, labels.data(), &acc), "accuracy");
      csv.row({std::to_string(mi), fmt(eps, "%g"), std::to_string(kept), std::to_string(total),
               fmt(static_cast<double>(kept) / static_cast<double>(total)), fmt(acc)});

      std::vector<double> nid(n_id), rid(n_id);
      check(nnspec_projection_scores(m.handle.get(), layer.c_str(), eps, idf.get(), nid.data(),
                                     rid.data(), n_id),
            "projection at layer '" + layer + "'");
      for (std::size_t k = 0; k < oodf.size(); ++k) {
        const std::size_t n = dataset_count(sets.ood[k].second.get());
        std::vector<double> no(n), ro(n);
        check(nnspec_projection_scores(m.handle.get(), layer.c_str(), eps, oodf[k].get(),
                                       no.data(), ro.data(), n),
              "projection at layer '" + layer + "'");
        auc.row({std::to_string(mi), fmt(eps, "%g"), layer, "projection_norm", sets.ood[k].first,
                 fmt(auroc(nid, no, NNSPEC_HIGHER_IS_ID))});
        auc.row({std::to_string(mi), fmt(eps, "%g"), layer, "projection_ratio", sets.ood[k].first,
                 fmt(auroc(rid, ro, NNSPEC_HIGHER_IS_ID))});
      }
    }
  }
}

void cmd_bias(const RunConfig& c) {
  auto models = load_models(c);
  EvalSets sets = load_eval_sets(c);
  std::vector<std::pair<std::string, const nnspec_dataset*>> all{{c.id->name, sets.id.get()}};
  for (auto& [name, d] : sets.ood) all.emplace_back(name, d.get());

  const std::size_t k_classes = models.front().classes;
  for (const auto& m : models)
    if (m.classes != k_classes) fail_validation("bias: models disagree on class count");

  std::string header = "dataset,cv,cv_error_bar,models,samples";
  for (std::size_t k = 0; k < k_classes; ++k) header += ",rate_" + std::to_string(k);
  CsvFile csv(c, "bias.csv", header);
  for (const auto& [name, d] : all) {
    std::vector<double> cvs;
    std::vector<std::vector<double>> rates(k_classes);
    std::size_t rows = 0;
    for (auto& m : models) {
      Features f = compute(m, d, {}, c);
      const auto l = logits(f);
      rows = l.rows;
      std::vector<double> r(l.cols);
      check(nnspec_prediction_rates(l.data, l.rows, l.cols, r.data()), "prediction rates");
      double cv = 0.0;
      check(nnspec_coefficient_of_variation(r.data(), r.size(), &cv), "coefficient of variation");
      cvs.push_back(cv);
      for (std::size_t k = 0; k < k_classes; ++k) rates[k].push_back(r[k]);
    }
    const auto q = summarize(cvs);
    std::vector<std::string> row{name, fmt(q.median), fmt(error_bar(q)),
                                 std::to_string(models.size()), std::to_string(rows)};
    for (std::size_t k = 0; k < k_classes; ++k) row.push_back(fmt(summarize(rates[k]).median));
    csv.row(row);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Layerwise spectral analysis and OOD detection for CNN classifiers"};
  app.require_subcommand(1);
  Overrides o;
  std::optional<std::uint64_t> seed;
  std::optional<double> epsilon;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "JSON run configuration")->required();
    sub->add_option("--out", o.out, "Output directory (overrides config)");
    sub->add_option("--seed", seed, "Root seed (overrides config)");
    sub->add_option("--epsilon", epsilon, "Relative singular-value cut (overrides config)");
    sub->add_option("--taps", o.taps, "Comma-separated weighted layer ids, or 'all'");
  };
  auto* sr = app.add_subcommand("stable-rank", "Stable rank of weights and tied covariances");
  auto* det = app.add_subcommand("detect", "OOD detection AUROC per layer");
  det->add_option("--method", o.method, "probability | feature | projection | all")
      ->check(CLI::IsMember({"probability", "feature", "projection", "all"}));
  auto* ck = app.add_subcommand("cka", "CKA, LR and CCA similarity between layers");
  auto* se = app.add_subcommand("sensitivity", "Noise sensitivity between layer pairs");
  auto* co = app.add_subcommand("compress", "Accuracy and parameters under SVD truncation");
  auto* bi = app.add_subcommand("bias", "Prediction rates and coefficient of variation");
  for (auto* s : {sr, det, ck, se, co, bi}) add_common(s);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitValidation;
  }
  o.seed = seed;
  o.epsilon = epsilon;

  try {
    const RunConfig c = load_config(o);
    if (sr->parsed()) cmd_stable_rank(c);
    else if (det->parsed()) cmd_detect(c, o.method);
    else if (ck->parsed()) cmd_cka(c);
    else if (se->parsed()) cmd_sensitivity(c);
    else if (co->parsed()) cmd_compress(c);
    else if (bi->parsed()) cmd_bias(c);
  } catch (const CliError& e) {
    std::cerr << "error: " << e.message << '\n';
    return e.code;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInternal;
  }
  return kExitOk;
}
