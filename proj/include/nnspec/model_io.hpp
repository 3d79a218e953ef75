#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "nnspec/tensor.hpp"

namespace nnspec {

enum class LayerKind {
  conv2d,
  batchnorm,
  relu,
  maxpool,
  global_avgpool,
  linear,
  add,
  flatten,
};

std::string_view to_string(LayerKind kind);
std::optional<LayerKind> parse_layer_kind(std::string_view name);

struct Conv2dParams {
  std::size_t in_ch = 0, out_ch = 0, kh = 0, kw = 0, stride = 1, pad = 0;
};

struct BatchNormParams {
  std::size_t channels = 0;
  double epsilon = 1e-5;
};

struct MaxPoolParams {
  std::size_t k = 0, stride = 0;
};

struct LinearParams {
  std::size_t in_dim = 0, out_dim = 0;
};

// Sums the primary input with the output of an earlier layer.
struct AddParams {
  std::string ref_id;
};

struct LayerSpec {
  std::string id;
  LayerKind kind = LayerKind::relu;
  std::variant<std::monostate, Conv2dParams, BatchNormParams, MaxPoolParams,
               LinearParams, AddParams>
      params;
  // Id of the layer whose output feeds this one; empty means the previous
  // layer (or the model input for the first layer). Lets a shortcut branch
  // read from a block input.
  std::string input;

  bool weighted() const noexcept {
    return kind == LayerKind::conv2d || kind == LayerKind::linear;
  }
};

struct InputSpec {
  std::size_t channels = 0, height = 0, width = 0;
};

// x = (byte * scale - mean[c]) / stddev[c]
struct Normalization {
  double scale = 1.0 / 255.0;
  std::vector<double> mean;
  std::vector<double> stddev;
};

using WeightSet = std::map<std::string, Tensor>;

inline constexpr std::string_view kInputTap = "input";

// Validated, immutable network description. Node 0 is the normalized input;
// node i + 1 is the output of layer i. Shapes are per sample (no batch axis).
class ModelGraph {
 public:
  ModelGraph(std::string name, InputSpec input, std::size_t class_count,
             Normalization normalization, std::vector<LayerSpec> layers,
             std::map<std::string, WeightSet> weights);

  const std::string& name() const noexcept { return name_; }
  const InputSpec& input() const noexcept { return input_; }
  std::size_t class_count() const noexcept { return class_count_; }
  const Normalization& normalization() const noexcept { return normalization_; }
  const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
  const std::map<std::string, WeightSet>& weights() const noexcept { return weights_; }

  const LayerSpec& layer(std::string_view id) const;
  const Tensor& weight(std::string_view layer_id, std::string_view name) const;
  const Tensor* find_weight(std::string_view layer_id, std::string_view name) const;

  std::size_t node_count() const noexcept { return layers_.size() + 1; }
  // Node index for a tap id ("input" or a layer id); ValidationError if unknown.
  std::size_t node_of(std::string_view tap_id) const;
  std::string node_name(std::size_t node) const;
  const Tensor::Dims& node_shape(std::size_t node) const { return shapes_.at(node); }
  // Nodes consumed by the layer that produces `node` (node >= 1).
  const std::vector<std::size_t>& node_inputs(std::size_t node) const {
    return inputs_.at(node);
  }

  std::vector<std::string> weighted_layer_ids() const;

  // Copy with some weight tensors replaced; shapes must be unchanged.
  ModelGraph with_weights(const std::map<std::string, WeightSet>& replacements) const;

 private:
  void validate();

  std::string name_;
  InputSpec input_;
  std::size_t class_count_ = 0;
  Normalization normalization_;
  std::vector<LayerSpec> layers_;
  std::map<std::string, WeightSet> weights_;
  std::map<std::string, std::size_t, std::less<>> index_;
  std::vector<Tensor::Dims> shapes_;
  std::vector<std::vector<std::size_t>> inputs_;
};

// Image set stored as raw bytes, [N, H, W, C].
struct DatasetBlob {
  std::string name;
  std::size_t count = 0, height = 0, width = 0, channels = 0;
  std::vector<std::uint8_t> pixels;
  std::optional<std::vector<int>> labels;

  std::size_t image_bytes() const noexcept { return height * width * channels; }
  std::span<const std::uint8_t> image(std::size_t index) const;
  Tensor::Dims dims() const { return {count, height, width, channels}; }
  // ValidationError if any label falls outside [0, class_count).
  void check_labels(std::size_t class_count) const;
  // New blob holding the listed samples in the given order.
  DatasetBlob subset(std::span<const std::size_t> indices) const;
};

// SPT1 tensor blob.
std::vector<std::uint8_t> encode_tensor(const Tensor& t);
Tensor decode_tensor(std::span<const std::uint8_t> bytes, const std::string& origin = "<memory>");
Tensor read_tensor(const std::filesystem::path& path);
void write_tensor(const std::filesystem::path& path, const Tensor& t);

// SPD1 dataset blob.
std::vector<std::uint8_t> encode_dataset(const DatasetBlob& d);
DatasetBlob decode_dataset(std::span<const std::uint8_t> bytes, const std::string& origin = "<memory>");
DatasetBlob load_dataset(const std::filesystem::path& path);
void save_dataset(const std::filesystem::path& path, const DatasetBlob& d);

// JSON manifest plus one SPT1 blob per weight tensor, paths relative to the
// manifest's directory.
ModelGraph load_model(const std::filesystem::path& manifest_path);
ModelGraph parse_manifest(std::string_view manifest_text,
                          const std::filesystem::path& blob_dir);
void save_model(const ModelGraph& model, const std::filesystem::path& manifest_path);

}  // namespace nnspec
