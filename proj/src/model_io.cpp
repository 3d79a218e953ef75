#include "nnspec/model_io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include <json.hpp>

#include "nnspec/error.hpp"

namespace nnspec {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr std::array<char, 4> kTensorMagic{'S', 'P', 'T', '1'};
constexpr std::array<char, 4> kDatasetMagic{'S', 'P', 'D', '1'};
constexpr std::uint32_t kBlobVersion = 1;
constexpr std::string_view kManifestFormat = "nnspec-manifest";
constexpr int kManifestVersion = 1;

// Little-endian byte writer/reader independent of host endianness.
class ByteWriter {
 public:
  void magic(const std::array<char, 4>& m) {
    for (char c : m) bytes_.push_back(static_cast<std::uint8_t>(c));
  }
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void raw(std::span<const std::uint8_t> data) {
    bytes_.insert(bytes_.end(), data.begin(), data.end());
  }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> bytes, std::string origin)
      : bytes_(bytes), origin_(std::move(origin)) {}

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw IoError(origin_ + ": truncated " + what + ": expected " +
                    std::to_string(pos_ + n) + " bytes, file has " +
                    std::to_string(bytes_.size()));
    }
  }
  bool magic(const std::array<char, 4>& m) {
    need(4, "header");
    const bool ok = std::equal(m.begin(), m.end(), bytes_.begin() + pos_,
                               [](char a, std::uint8_t b) { return static_cast<std::uint8_t>(a) == b; });
    pos_ += 4;
    return ok;
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return bytes_[pos_++];
  }
  std::uint16_t u16(const char* what) { return static_cast<std::uint16_t>(get(2, what)); }
  std::uint32_t u32(const char* what) { return static_cast<std::uint32_t>(get(4, what)); }
  std::uint64_t u64(const char* what) { return get(8, what); }
  float f32() {
    return std::bit_cast<float>(static_cast<std::uint32_t>(get(4, "payload")));
  }
  std::span<const std::uint8_t> raw(std::size_t n, const char* what) {
    need(n, what);
    auto out = bytes_.subspan(pos_, n);
    pos_ += n;
    return out;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::size_t position() const { return pos_; }
  const std::string& origin() const { return origin_; }

 private:
  std::uint64_t get(int n, const char* what) {
    need(static_cast<std::size_t>(n), what);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
  std::string origin_;
};

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open file '" + path.string() + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const fs::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write file '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to '" + path.string() + "'");
}

std::string layer_context(const std::string& id) { return "layer '" + id + "': "; }

Tensor::Dims expected_weight_shape(const LayerSpec& layer, std::string_view name) {
  switch (layer.kind) {
    case LayerKind::conv2d: {
      const auto& p = std::get<Conv2dParams>(layer.params);
      if (name == "weight") return {p.out_ch, p.in_ch, p.kh, p.kw};
      if (name == "bias") return {p.out_ch};
      break;
    }
    case LayerKind::linear: {
      const auto& p = std::get<LinearParams>(layer.params);
      if (name == "weight") return {p.out_dim, p.in_dim};
      if (name == "bias") return {p.out_dim};
      break;
    }
    case LayerKind::batchnorm: {
      const auto& p = std::get<BatchNormParams>(layer.params);
      if (name == "gamma" || name == "beta" || name == "running_mean" ||
          name == "running_var")
        return {p.channels};
      break;
    }
    default:
      break;
  }
  throw ValidationError(layer_context(layer.id) + "unexpected weight tensor '" +
                        std::string(name) + "' for kind " +
                        std::string(to_string(layer.kind)));
}

std::vector<std::string_view> required_weights(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv2d:
    case LayerKind::linear:
      return {"weight"};
    case LayerKind::batchnorm:
      return {"gamma", "beta", "running_mean", "running_var"};
    default:
      return {};
  }
}

}  // namespace

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::global_avgpool: return "global_avgpool";
    case LayerKind::linear: return "linear";
    case LayerKind::add: return "add";
    case LayerKind::flatten: return "flatten";
  }
  return "unknown";
}

std::optional<LayerKind> parse_layer_kind(std::string_view name) {
  static const std::array<LayerKind, 8> all{
      LayerKind::conv2d, LayerKind::batchnorm,      LayerKind::relu,
      LayerKind::maxpool, LayerKind::global_avgpool, LayerKind::linear,
      LayerKind::add,    LayerKind::flatten};
  for (LayerKind k : all)
    if (to_string(k) == name) return k;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// ModelGraph

ModelGraph::ModelGraph(std::string name, InputSpec input, std::size_t class_count,
                       Normalization normalization, std::vector<LayerSpec> layers,
                       std::map<std::string, WeightSet> weights)
    : name_(std::move(name)),
      input_(input),
      class_count_(class_count),
      normalization_(std::move(normalization)),
      layers_(std::move(layers)),
      weights_(std::move(weights)) {
  validate();
}

void ModelGraph::validate() {
  if (class_count_ < 1) throw ValidationError("model: class_count must be positive");
  if (input_.channels == 0 || input_.height == 0 || input_.width == 0) {
    throw ValidationError("model: input extents must be positive");
  }
  if (normalization_.mean.size() != input_.channels ||
      normalization_.stddev.size() != input_.channels) {
    throw ValidationError("model: normalization needs one mean/std per input channel (" +
                          std::to_string(input_.channels) + ")");
  }
  for (double s : normalization_.stddev) {
    if (!(s > 0.0) || !std::isfinite(s))
      throw ValidationError("model: normalization std must be positive and finite");
  }
  if (!std::isfinite(normalization_.scale) || normalization_.scale == 0.0) {
    throw ValidationError("model: normalization scale must be finite and nonzero");
  }
  if (layers_.empty()) throw ValidationError("model: no layers");

  index_.clear();
  shapes_.assign(1, Tensor::Dims{input_.channels, input_.height, input_.width});
  inputs_.assign(1, {});

  auto resolve = [&](const std::string& who, const std::string& id,
                     const char* field) -> std::size_t {
    if (id == kInputTap) return 0;
    auto it = index_.find(id);
    if (it == index_.end()) {
      throw ValidationError(layer_context(who) + std::string(field) + " '" + id +
                            "' does not name an earlier layer");
    }
    return it->second + 1;
  };

  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const LayerSpec& layer = layers_[i];
    if (layer.id.empty()) throw ValidationError("layer " + std::to_string(i) + ": empty id");
    if (layer.id == kInputTap) throw ValidationError("layer id 'input' is reserved");
    if (index_.count(layer.id)) throw ValidationError(layer_context(layer.id) + "duplicate id");

    const std::size_t primary = layer.input.empty() ? i : resolve(layer.id, layer.input, "input");
    std::vector<std::size_t> in_nodes{primary};
    const Tensor::Dims in = shapes_[primary];
    Tensor::Dims out;
    const std::string ctx = layer_context(layer.id);
    auto require_rank = [&](std::size_t r) {
      if (in.size() != r) {
        throw ValidationError(ctx + std::string(to_string(layer.kind)) + " expects rank-" +
                              std::to_string(r) + " input, got " + format_dims(in));
      }
    };
    auto require_params = [&](bool ok) {
      if (!ok) throw ValidationError(ctx + "parameters do not match kind " +
                                     std::string(to_string(layer.kind)));
    };

    switch (layer.kind) {
      case LayerKind::conv2d: {
        require_params(std::holds_alternative<Conv2dParams>(layer.params));
        const auto& p = std::get<Conv2dParams>(layer.params);
        require_rank(3);
        if (p.in_ch == 0 || p.out_ch == 0 || p.kh == 0 || p.kw == 0 || p.stride == 0)
          throw ValidationError(ctx + "conv2d extents and stride must be positive");
        if (in[0] != p.in_ch)
          throw ValidationError(ctx + "in_ch " + std::to_string(p.in_ch) +
                                " does not match incoming channels " + std::to_string(in[0]));
        if (in[1] + 2 * p.pad < p.kh || in[2] + 2 * p.pad < p.kw)
          throw ValidationError(ctx + "kernel larger than padded input " + format_dims(in));
        out = {p.out_ch, (in[1] + 2 * p.pad - p.kh) / p.stride + 1,
               (in[2] + 2 * p.pad - p.kw) / p.stride + 1};
        break;
      }
      case LayerKind::batchnorm: {
        require_params(std::holds_alternative<BatchNormParams>(layer.params));
        const auto& p = std::get<BatchNormParams>(layer.params);
        if (in.size() != 3 && in.size() != 1)
          throw ValidationError(ctx + "batchnorm expects [C,H,W] or [C] input, got " + format_dims(in));
        if (in[0] != p.channels)
          throw ValidationError(ctx + "channels " + std::to_string(p.channels) +
                                " does not match incoming " + std::to_string(in[0]));
        if (!(p.epsilon >= 0.0) || !std::isfinite(p.epsilon))
          throw ValidationError(ctx + "batchnorm epsilon must be finite and nonnegative");
        out = in;
        break;
      }
      case LayerKind::relu:
        out = in;
        break;
      case LayerKind::maxpool: {
        require_params(std::holds_alternative<MaxPoolParams>(layer.params));
        const auto& p = std::get<MaxPoolParams>(layer.params);
        require_rank(3);
        if (p.k == 0 || p.stride == 0) throw ValidationError(ctx + "maxpool k and stride must be positive");
        if (in[1] < p.k || in[2] < p.k) throw ValidationError(ctx + "pool window larger than input " + format_dims(in));
        out = {in[0], (in[1] - p.k) / p.stride + 1, (in[2] - p.k) / p.stride + 1};
        break;
      }
      case LayerKind::global_avgpool:
        require_rank(3);
        out = {in[0]};
        break;
      case LayerKind::flatten: {
        std::size_t volume = 1;
        for (std::size_t e : in) volume *= e;
        out = {volume};
        break;
      }
      case LayerKind::linear: {
        require_params(std::holds_alternative<LinearParams>(layer.params));
        const auto& p = std::get<LinearParams>(layer.params);
        require_rank(1);
        if (p.in_dim == 0 || p.out_dim == 0) throw ValidationError(ctx + "linear dims must be positive");
        if (in[0] != p.in_dim)
          throw ValidationError(ctx + "in_dim " + std::to_string(p.in_dim) +
                                " does not match incoming " + std::to_string(in[0]));
        out = {p.out_dim};
        break;
      }
      case LayerKind::add: {
        require_params(std::holds_alternative<AddParams>(layer.params));
        const auto& p = std::get<AddParams>(layer.params);
        const std::size_t ref = resolve(layer.id, p.ref_id, "ref_id");
        if (shapes_[ref] != in)
          throw ValidationError(ctx + "add operands differ in shape: " + format_dims(in) +
                                " vs '" + p.ref_id + "' " + format_dims(shapes_[ref]));
        in_nodes.push_back(ref);
        out = in;
        break;
      }
    }

    // Weight tensors.
    const auto wit = weights_.find(layer.id);
    for (std::string_view name : required_weights(layer.kind)) {
      if (wit == weights_.end() || !wit->second.count(std::string(name)))
        throw ValidationError(ctx + "missing weight tensor '" + std::string(name) + "'");
    }
    if (wit != weights_.end()) {
      for (const auto& [name, tensor] : wit->second) {
        const Tensor::Dims want = expected_weight_shape(layer, name);
        if (tensor.dims() != want)
          throw ValidationError(ctx + "weight '" + name + "' has dims " +
                                format_dims(tensor.dims()) + ", expected " + format_dims(want));
      }
    }

    index_.emplace(layer.id, i);
    shapes_.push_back(std::move(out));
    inputs_.push_back(std::move(in_nodes));
  }

  for (const auto& [id, set] : weights_) {
    if (!index_.count(id)) throw ValidationError("weights given for unknown layer '" + id + "'");
  }

  const LayerSpec& last = layers_.back();
  if (last.kind != LayerKind::linear)
    throw ValidationError(layer_context(last.id) + "final layer must be linear");
  if (std::get<LinearParams>(last.params).out_dim != class_count_)
    throw ValidationError(layer_context(last.id) + "out_dim " +
                          std::to_string(std::get<LinearParams>(last.params).out_dim) +
                          " does not equal class_count " + std::to_string(class_count_));
}

const LayerSpec& ModelGraph::layer(std::string_view id) const {
  auto it = index_.find(id);
  if (it == index_.end()) throw ValidationError("unknown layer '" + std::string(id) + "'");
  return layers_[it->second];
}

const Tensor* ModelGraph::find_weight(std::string_view layer_id, std::string_view name) const {
  auto it = weights_.find(std::string(layer_id));
  if (it == weights_.end()) return nullptr;
  auto jt = it->second.find(std::string(name));
  return jt == it->second.end() ? nullptr : &jt->second;
}

const Tensor& ModelGraph::weight(std::string_view layer_id, std::string_view name) const {
  if (const Tensor* t = find_weight(layer_id, name)) return *t;
  throw ValidationError("layer '" + std::string(layer_id) + "' has no weight '" +
                        std::string(name) + "'");
}

std::size_t ModelGraph::node_of(std::string_view tap_id) const {
  if (tap_id == kInputTap) return 0;
  auto it = index_.find(tap_id);
  if (it == index_.end()) throw ValidationError("unknown tap '" + std::string(tap_id) + "'");
  return it->second + 1;
}

std::string ModelGraph::node_name(std::size_t node) const {
  if (node == 0) return std::string(kInputTap);
  return layers_.at(node - 1).id;
}

std::vector<std::string> ModelGraph::weighted_layer_ids() const {
  std::vector<std::string> ids;
  for (const auto& l : layers_)
    if (l.weighted()) ids.push_back(l.id);
  return ids;
}

ModelGraph ModelGraph::with_weights(const std::map<std::string, WeightSet>& replacements) const {
  auto weights = weights_;
  for (const auto& [id, set] : replacements) {
    for (const auto& [name, tensor] : set) weights[id][name] = tensor;
  }
  return ModelGraph(name_, input_, class_count_, normalization_, layers_, std::move(weights));
}

// ---------------------------------------------------------------------------
// DatasetBlob

std::span<const std::uint8_t> DatasetBlob::image(std::size_t index) const {
  if (index >= count) {
    throw ValidationError("dataset '" + name + "': image index " + std::to_string(index) +
                          " out of range (" + std::to_string(count) + ")");
  }
  return std::span<const std::uint8_t>(pixels).subspan(index * image_bytes(), image_bytes());
}

void DatasetBlob::check_labels(std::size_t class_count) const {
  if (!labels) return;
  for (std::size_t i = 0; i < labels->size(); ++i) {
    const int y = (*labels)[i];
    if (y < 0 || static_cast<std::size_t>(y) >= class_count) {
      throw ValidationError("dataset '" + name + "': label " + std::to_string(y) +
                            " at index " + std::to_string(i) + " outside [0, " +
                            std::to_string(class_count) + ")");
    }
  }
}

DatasetBlob DatasetBlob::subset(std::span<const std::size_t> indices) const {
  DatasetBlob out{name, indices.size(), height, width, channels, {}, std::nullopt};
  out.pixels.reserve(indices.size() * image_bytes());
  if (labels) out.labels.emplace();
  for (std::size_t idx : indices) {
    auto img = image(idx);
    out.pixels.insert(out.pixels.end(), img.begin(), img.end());
    if (labels) out.labels->push_back((*labels)[idx]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Blob formats

std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
  if (t.empty()) throw ShapeError("cannot encode an empty tensor");
  ByteWriter w;
  w.magic(kTensorMagic);
  w.u32(kBlobVersion);
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.dims()) w.u64(e);
  for (float v : t.data()) w.f32(v);
  return w.take();
}

Tensor decode_tensor(std::span<const std::uint8_t> bytes, const std::string& origin) {
  ByteReader r(bytes, origin);
  if (!r.magic(kTensorMagic)) throw FormatError(origin + ": bad tensor magic (expected SPT1)");
  const std::uint32_t version = r.u32("header");
  if (version != kBlobVersion)
    throw FormatError(origin + ": unsupported tensor version " + std::to_string(version));
  const std::uint32_t ndim = r.u32("header");
  if (ndim < 1 || ndim > 4)
    throw FormatError(origin + ": tensor rank " + std::to_string(ndim) + " outside 1..4");
  Tensor::Dims dims(ndim);
  std::uint64_t volume = 1;
  for (auto& e : dims) {
    const std::uint64_t extent = r.u64("header");
    if (extent == 0) throw FormatError(origin + ": zero tensor extent");
    if (volume > (std::uint64_t{1} << 40) / extent)
      throw FormatError(origin + ": tensor extents overflow");
    volume *= extent;
    e = static_cast<std::size_t>(extent);
  }
  r.need(static_cast<std::size_t>(volume) * 4, "payload");
  std::vector<float> data(static_cast<std::size_t>(volume));
  for (auto& v : data) v = r.f32();
  if (r.remaining() != 0)
    throw FormatError(origin + ": " + std::to_string(r.remaining()) + " trailing bytes");
  return Tensor(std::move(dims), std::move(data));
}

Tensor read_tensor(const fs::path& path) {
  const auto bytes = read_file(path);
  return decode_tensor(bytes, path.string());
}

void write_tensor(const fs::path& path, const Tensor& t) { write_file(path, encode_tensor(t)); }

std::vector<std::uint8_t> encode_dataset(const DatasetBlob& d) {
  if (d.pixels.size() != d.count * d.image_bytes())
    throw ShapeError("dataset '" + d.name + "': pixel buffer size mismatch");
  if (d.labels && d.labels->size() != d.count)
    throw ShapeError("dataset '" + d.name + "': label count mismatch");
  ByteWriter w;
  w.magic(kDatasetMagic);
  w.u32(kBlobVersion);
  w.u32(static_cast<std::uint32_t>(d.count));
  w.u32(static_cast<std::uint32_t>(d.height));
  w.u32(static_cast<std::uint32_t>(d.width));
  w.u32(static_cast<std::uint32_t>(d.channels));
  w.u8(d.labels ? 1 : 0);
  w.raw(d.pixels);
  if (d.labels) {
    for (int y : *d.labels) {
      if (y < 0 || y > 0xFFFF) throw ValidationError("dataset label " + std::to_string(y) + " does not fit u16");
      w.u16(static_cast<std::uint16_t>(y));
    }
  }
  return w.take();
}

DatasetBlob decode_dataset(std::span<const std::uint8_t> bytes, const std::string& origin) {
  ByteReader r(bytes, origin);
  if (!r.magic(kDatasetMagic)) throw FormatError(origin + ": bad dataset magic (expected SPD1)");
  const std::uint32_t version = r.u32("header");
  if (version != kBlobVersion)
    throw FormatError(origin + ": unsupported dataset version " + std::to_string(version));
  DatasetBlob d;
  d.name = fs::path(origin).stem().string();
  d.count = r.u32("header");
  d.height = r.u32("header");
  d.width = r.u32("header");
  d.channels = r.u32("header");
  const std::uint8_t has_labels = r.u8("header");
  if (has_labels > 1) throw FormatError(origin + ": has_labels flag must be 0 or 1");
  if (d.height == 0 || d.width == 0 || d.channels == 0)
    throw FormatError(origin + ": zero image extent");
  const std::size_t payload = d.count * d.image_bytes();
  const std::size_t expected = r.position() + payload + (has_labels ? 2 * d.count : 0);
  if (bytes.size() < expected) {
    throw IoError(origin + ": truncated dataset: expected " + std::to_string(expected) +
                  " bytes, file has " + std::to_string(bytes.size()));
  }
  auto px = r.raw(payload, "pixels");
  d.pixels.assign(px.begin(), px.end());
  if (has_labels) {
    d.labels.emplace(d.count);
    for (auto& y : *d.labels) y = r.u16("labels");
  }
  if (r.remaining() != 0)
    throw FormatError(origin + ": " + std::to_string(r.remaining()) + " trailing bytes");
  return d;
}

DatasetBlob load_dataset(const fs::path& path) {
  const auto bytes = read_file(path);
  return decode_dataset(bytes, path.string());
}

void save_dataset(const fs::path& path, const DatasetBlob& d) { write_file(path, encode_dataset(d)); }

// ---------------------------------------------------------------------------
// Manifest

namespace {

std::size_t get_extent(const json& obj, const char* key, const std::string& ctx,
                       std::optional<std::size_t> fallback = std::nullopt) {
  auto it = obj.find(key);
  if (it == obj.end()) {
    if (fallback) return *fallback;
    throw ValidationError(ctx + "missing field '" + key + "'");
  }
  if (!it->is_number_integer() || it->get<std::int64_t>() < 0)
    throw ValidationError(ctx + "field '" + key + "' must be a nonnegative integer");
  return static_cast<std::size_t>(it->get<std::int64_t>());
}

LayerSpec parse_layer(const json& j, std::size_t position) {
  if (!j.is_object()) throw ValidationError("layer " + std::to_string(position) + ": not an object");
  LayerSpec layer;
  if (!j.contains("id") || !j["id"].is_string())
    throw ValidationError("layer " + std::to_string(position) + ": missing string 'id'");
  layer.id = j["id"].get<std::string>();
  const std::string ctx = layer_context(layer.id);
  if (!j.contains("kind") || !j["kind"].is_string()) throw ValidationError(ctx + "missing string 'kind'");
  const auto kind = parse_layer_kind(j["kind"].get<std::string>());
  if (!kind) throw ValidationError(ctx + "unknown kind '" + j["kind"].get<std::string>() + "'");
  layer.kind = *kind;
  if (j.contains("input")) {
    if (!j["input"].is_string()) throw ValidationError(ctx + "'input' must be a string");
    layer.input = j["input"].get<std::string>();
  }
  switch (layer.kind) {
    case LayerKind::conv2d:
      layer.params = Conv2dParams{get_extent(j, "in_ch", ctx), get_extent(j, "out_ch", ctx),
                                  get_extent(j, "kh", ctx),    get_extent(j, "kw", ctx),
                                  get_extent(j, "stride", ctx, 1), get_extent(j, "pad", ctx, 0)};
      break;
    case LayerKind::batchnorm: {
      BatchNormParams p{get_extent(j, "channels", ctx), 1e-5};
      if (j.contains("epsilon")) {
        if (!j["epsilon"].is_number()) throw ValidationError(ctx + "'epsilon' must be a number");
        p.epsilon = j["epsilon"].get<double>();
      }
      layer.params = p;
      break;
    }
    case LayerKind::maxpool:
      layer.params = MaxPoolParams{get_extent(j, "k", ctx), get_extent(j, "stride", ctx)};
      break;
    case LayerKind::linear:
      layer.params = LinearParams{get_extent(j, "in_dim", ctx), get_extent(j, "out_dim", ctx)};
      break;
    case LayerKind::add:
      if (!j.contains("ref_id") || !j["ref_id"].is_string())
        throw ValidationError(ctx + "add needs string 'ref_id'");
      layer.params = AddParams{j["ref_id"].get<std::string>()};
      break;
    default:
      break;
  }
  return layer;
}

}  // namespace

ModelGraph parse_manifest(std::string_view manifest_text, const fs::path& blob_dir) {
  json doc;
  try {
    doc = json::parse(manifest_text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("manifest is not valid JSON: ") + e.what());
  }
  try {
    if (!doc.is_object()) throw FormatError("manifest root must be an object");
    if (doc.value("format", std::string()) != kManifestFormat)
      throw FormatError("manifest format tag must be '" + std::string(kManifestFormat) + "'");
    if (!doc.contains("version") || !doc["version"].is_number_integer() ||
        doc["version"].get<int>() != kManifestVersion)
      throw FormatError("unsupported manifest version (expected " +
                        std::to_string(kManifestVersion) + ")");

    const std::string ctx = "manifest: ";
    if (!doc.contains("input") || !doc["input"].is_object())
      throw ValidationError(ctx + "missing 'input' object");
    const json& in = doc["input"];
    InputSpec input{get_extent(in, "channels", ctx), get_extent(in, "height", ctx),
                    get_extent(in, "width", ctx)};
    const std::size_t classes = get_extent(doc, "class_count", ctx);

    Normalization norm;
    if (doc.contains("normalization")) {
      const json& n = doc["normalization"];
      if (!n.is_object()) throw ValidationError(ctx + "'normalization' must be an object");
      if (n.contains("scale")) norm.scale = n.at("scale").get<double>();
      norm.mean = n.at("mean").get<std::vector<double>>();
      norm.stddev = n.at("std").get<std::vector<double>>();
    } else {
      norm.mean.assign(input.channels, 0.0);
      norm.stddev.assign(input.channels, 1.0);
    }

    if (!doc.contains("layers") || !doc["layers"].is_array())
      throw ValidationError(ctx + "missing 'layers' array");
    std::vector<LayerSpec> layers;
    std::map<std::string, WeightSet> weights;
    for (std::size_t i = 0; i < doc["layers"].size(); ++i) {
      const json& lj = doc["layers"][i];
      LayerSpec layer = parse_layer(lj, i);
      if (lj.contains("weights")) {
        if (!lj["weights"].is_object())
          throw ValidationError(layer_context(layer.id) + "'weights' must be an object");
        for (const auto& [name, rel] : lj["weights"].items()) {
          if (!rel.is_string())
            throw ValidationError(layer_context(layer.id) + "weight path must be a string");
          const fs::path path = blob_dir / rel.get<std::string>();
          if (!fs::exists(path))
            throw IoError(layer_context(layer.id) + "missing blob file '" + path.string() + "'");
          weights[layer.id][name] = read_tensor(path);
        }
      }
      layers.push_back(std::move(layer));
    }
    return ModelGraph(doc.value("name", std::string("model")), input, classes, std::move(norm),
                      std::move(layers), std::move(weights));
  } catch (const json::exception& e) {
    throw ValidationError(std::string("manifest: ") + e.what());
  }
}

ModelGraph load_model(const fs::path& manifest_path) {
  const auto bytes = read_file(manifest_path);
  return parse_manifest(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()),
                        manifest_path.parent_path());
}

void save_model(const ModelGraph& model, const fs::path& manifest_path) {
  const fs::path dir = manifest_path.parent_path();
  if (!dir.empty()) fs::create_directories(dir);
  json doc;
  doc["format"] = kManifestFormat;
  doc["version"] = kManifestVersion;
  doc["name"] = model.name();
  doc["input"] = {{"channels", model.input().channels},
                  {"height", model.input().height},
                  {"width", model.input().width}};
  doc["class_count"] = model.class_count();
  doc["normalization"] = {{"scale", model.normalization().scale},
                          {"mean", model.normalization().mean},
                          {"std", model.normalization().stddev}};
  json layers = json::array();
  for (const LayerSpec& l : model.layers()) {
    json j{{"id", l.id}, {"kind", std::string(to_string(l.kind))}};
    if (!l.input.empty()) j["input"] = l.input;
    std::visit(
        [&](const auto& p) {
          using P = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<P, Conv2dParams>) {
            j["in_ch"] = p.in_ch; j["out_ch"] = p.out_ch; j["kh"] = p.kh;
            j["kw"] = p.kw; j["stride"] = p.stride; j["pad"] = p.pad;
          } else if constexpr (std::is_same_v<P, BatchNormParams>) {
            j["channels"] = p.channels; j["epsilon"] = p.epsilon;
          } else if constexpr (std::is_same_v<P, MaxPoolParams>) {
            j["k"] = p.k; j["stride"] = p.stride;
          } else if constexpr (std::is_same_v<P, LinearParams>) {
            j["in_dim"] = p.in_dim; j["out_dim"] = p.out_dim;
          } else if constexpr (std::is_same_v<P, AddParams>) {
            j["ref_id"] = p.ref_id;
          }
        },
        l.params);
    auto wit = model.weights().find(l.id);
    if (wit != model.weights().end()) {
      json w = json::object();
      for (const auto& [name, tensor] : wit->second) {
        const std::string file = l.id + "." + name + ".spt";
        write_tensor(dir / file, tensor);
        w[name] = file;
      }
      j["weights"] = w;
    }
    layers.push_back(std::move(j));
  }
  doc["layers"] = std::move(layers);
  std::ofstream out(manifest_path, std::ios::trunc);
  if (!out) throw IoError("cannot write manifest '" + manifest_path.string() + "'");
  out << doc.dump(2) << '\n';
}

}  // namespace nnspec
