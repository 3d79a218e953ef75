#pragma once

// Small hand-built models for tests.

#include <filesystem>
#include <string>
#include <vector>

#include "nnspec/model_io.hpp"
#include "nnspec/random.hpp"
#include "oracles.hpp"

#ifndef NNSPEC_FIXTURE_DIR
#error "NNSPEC_FIXTURE_DIR must point at tests/fixtures"
#endif

namespace testmodels {

using namespace nnspec;

inline std::filesystem::path fixture_dir() { return NNSPEC_FIXTURE_DIR; }
inline std::filesystem::path fixture_manifest() { return fixture_dir() / "tiny_vgg" / "manifest.json"; }
inline std::filesystem::path fixture_data(const std::string& name) {
  return fixture_dir() / "data" / (name + ".spd");
}

inline LayerSpec conv(std::string id, std::size_t in, std::size_t out, std::size_t k,
                      std::size_t stride = 1, std::size_t pad = 0, std::string input = {}) {
  LayerSpec l{std::move(id), LayerKind::conv2d, Conv2dParams{in, out, k, k, stride, pad}, std::move(input)};
  return l;
}
inline LayerSpec simple(std::string id, LayerKind kind) {
  LayerSpec l;
  l.id = std::move(id);
  l.kind = kind;
  return l;
}
inline LayerSpec linear(std::string id, std::size_t in, std::size_t out) {
  LayerSpec l;
  l.id = std::move(id);
  l.kind = LayerKind::linear;
  l.params = LinearParams{in, out};
  return l;
}
inline LayerSpec batchnorm(std::string id, std::size_t c) {
  LayerSpec l;
  l.id = std::move(id);
  l.kind = LayerKind::batchnorm;
  l.params = BatchNormParams{c, 1e-5};
  return l;
}
inline LayerSpec maxpool(std::string id, std::size_t k, std::size_t stride) {
  LayerSpec l;
  l.id = std::move(id);
  l.kind = LayerKind::maxpool;
  l.params = MaxPoolParams{k, stride};
  return l;
}
inline LayerSpec add(std::string id, std::string ref) {
  LayerSpec l;
  l.id = std::move(id);
  l.kind = LayerKind::add;
  l.params = AddParams{std::move(ref)};
  return l;
}

inline Normalization plain_norm(std::size_t c) {
  Normalization n;
  n.mean.assign(c, 0.5);
  n.stddev.assign(c, 0.25);
  return n;
}

inline WeightSet bn_weights(Rng& rng, std::size_t c) {
  WeightSet w;
  w["gamma"] = oracle::random_tensor(rng, {c}, 0.5);
  w["beta"] = oracle::random_tensor(rng, {c}, 0.2);
  w["running_mean"] = oracle::random_tensor(rng, {c}, 0.3);
  Tensor var({c});
  for (auto& v : var.data()) v = static_cast<float>(0.5 + rng.uniform());
  w["running_var"] = var;
  return w;
}

// conv(3->4, 3x3, pad 1) bn relu maxpool conv(4->5, 3x3, stride 2) relu flatten linear.
inline ModelGraph random_cnn(std::uint64_t seed, std::size_t classes = 3) {
  Rng rng(seed);
  std::vector<LayerSpec> layers{conv("c1", 3, 4, 3, 1, 1), batchnorm("bn1", 4),
                                simple("r1", LayerKind::relu), maxpool("p1", 2, 2),
                                conv("c2", 4, 5, 3, 2, 0), simple("r2", LayerKind::relu),
                                simple("flat", LayerKind::flatten), linear("fc", 5, classes)};
  std::map<std::string, WeightSet> w;
  w["c1"]["weight"] = oracle::random_tensor(rng, {4, 3, 3, 3}, 0.4);
  w["c1"]["bias"] = oracle::random_tensor(rng, {4}, 0.1);
  w["bn1"] = bn_weights(rng, 4);
  w["c2"]["weight"] = oracle::random_tensor(rng, {5, 4, 3, 3}, 0.3);
  w["fc"]["weight"] = oracle::random_tensor(rng, {classes, 5}, 0.5);
  w["fc"]["bias"] = oracle::random_tensor(rng, {classes}, 0.1);
  return ModelGraph("random_cnn", {3, 8, 8}, classes, plain_norm(3), layers, w);
}

// Residual block with a 1x1 projection shortcut read from the block input:
// c1 r1 | c2 r2 c3 sc(input r1) add(ref c3) r3 | gap fc
inline ModelGraph residual_cnn(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<LayerSpec> layers{
      conv("c1", 2, 4, 3, 1, 1),      simple("r1", LayerKind::relu),
      conv("c2", 4, 6, 3, 1, 1),      simple("r2", LayerKind::relu),
      conv("c3", 6, 6, 3, 1, 1),      conv("sc", 4, 6, 1, 1, 0, "r1"),
      add("add", "c3"),               simple("r3", LayerKind::relu),
      simple("gap", LayerKind::global_avgpool), linear("fc", 6, 3)};
  std::map<std::string, WeightSet> w;
  w["c1"]["weight"] = oracle::random_tensor(rng, {4, 2, 3, 3}, 0.4);
  w["c2"]["weight"] = oracle::random_tensor(rng, {6, 4, 3, 3}, 0.3);
  w["c3"]["weight"] = oracle::random_tensor(rng, {6, 6, 3, 3}, 0.3);
  w["sc"]["weight"] = oracle::random_tensor(rng, {6, 4, 1, 1}, 0.5);
  w["fc"]["weight"] = oracle::random_tensor(rng, {3, 6}, 0.5);
  return ModelGraph("residual_cnn", {2, 6, 6}, 3, plain_norm(2), layers, w);
}

inline DatasetBlob random_images(std::uint64_t seed, std::size_t n, std::size_t h,
                                 std::size_t w, std::size_t c, std::size_t classes = 0) {
  Rng rng(seed);
  DatasetBlob d;
  d.name = "random";
  d.count = n;
  d.height = h;
  d.width = w;
  d.channels = c;
  d.pixels.resize(n * h * w * c);
  for (auto& p : d.pixels) p = static_cast<std::uint8_t>(rng.below(256));
  if (classes) {
    d.labels.emplace(n);
    for (std::size_t i = 0; i < n; ++i) (*d.labels)[i] = static_cast<int>(i % classes);
  }
  return d;
}

}  // namespace testmodels
