#include "nnspec/inference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <set>

#include "nnspec/error.hpp"
#include "nnspec/linalg.hpp"

namespace nnspec {

namespace {

Tensor::Dims with_batch(std::size_t batch, const Tensor::Dims& shape) {
  Tensor::Dims dims{batch};
  dims.insert(dims.end(), shape.begin(), shape.end());
  return dims;
}

Tensor conv2d(const Tensor& x, const Conv2dParams& p, const Tensor& weight, const Tensor* bias) {
  const std::size_t batch = x.dim(0);
  const std::size_t ho = (x.dim(2) + 2 * p.pad - p.kh) / p.stride + 1;
  const std::size_t wo = (x.dim(3) + 2 * p.pad - p.kw) / p.stride + 1;
  const std::size_t positions = ho * wo;
  const std::size_t k = p.in_ch * p.kh * p.kw;
  const Tensor patches = extract_patches(x, p);
  Tensor out({batch, p.out_ch, ho, wo});
  const float* w = weight.data().data();
  const float* pat = patches.data().data();
  float* o = out.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t oc = 0; oc < p.out_ch; ++oc) {
      const float* wrow = w + oc * k;
      const double b0 = bias ? static_cast<double>(bias->data()[oc]) : 0.0;
      float* orow = o + (b * p.out_ch + oc) * positions;
      for (std::size_t pos = 0; pos < positions; ++pos) {
        const float* prow = pat + (b * positions + pos) * k;
        double acc = 0.0;
        for (std::size_t i = 0; i < k; ++i) acc += static_cast<double>(wrow[i]) * prow[i];
        orow[pos] = static_cast<float>(acc + b0);
      }
    }
  }
  return out;
}

Tensor batchnorm(const Tensor& x, const BatchNormParams& p, const ModelGraph& model,
                 const std::string& id) {
  const auto gamma = model.weight(id, "gamma").data();
  const auto beta = model.weight(id, "beta").data();
  const auto mean = model.weight(id, "running_mean").data();
  const auto var = model.weight(id, "running_var").data();
  Tensor out(x.dims());
  const std::size_t batch = x.dim(0);
  const std::size_t spatial = x.size() / (batch * p.channels);
  const auto in = x.data();
  auto o = out.data();
  for (std::size_t c = 0; c < p.channels; ++c) {
    const double denom = std::sqrt(static_cast<double>(var[c]) + p.epsilon);
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t base = (b * p.channels + c) * spatial;
      for (std::size_t s = 0; s < spatial; ++s) {
        o[base + s] = static_cast<float>(
            static_cast<double>(gamma[c]) * (static_cast<double>(in[base + s]) - mean[c]) / denom +
            beta[c]);
      }
    }
  }
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out = x;
  for (float& v : out.data()) v = v > 0.0f ? v : 0.0f;
  return out;
}

Tensor maxpool(const Tensor& x, const MaxPoolParams& p) {
  const std::size_t batch = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ho = (h - p.k) / p.stride + 1, wo = (w - p.k) / p.stride + 1;
  Tensor out({batch, ch, ho, wo});
  const auto in = x.data();
  auto o = out.data();
  for (std::size_t bc = 0; bc < batch * ch; ++bc) {
    const float* plane = in.data() + bc * h * w;
    for (std::size_t y = 0; y < ho; ++y) {
      for (std::size_t xx = 0; xx < wo; ++xx) {
        float best = -std::numeric_limits<float>::infinity();
        for (std::size_t i = 0; i < p.k; ++i)
          for (std::size_t j = 0; j < p.k; ++j)
            best = std::max(best, plane[(y * p.stride + i) * w + xx * p.stride + j]);
        o[(bc * ho + y) * wo + xx] = best;
      }
    }
  }
  return out;
}

Tensor linear(const Tensor& x, const LinearParams& p, const Tensor& weight, const Tensor* bias) {
  const std::size_t batch = x.dim(0);
  Tensor out({batch, p.out_dim});
  const float* w = weight.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    const float* xr = x.data().data() + b * p.in_dim;
    for (std::size_t o = 0; o < p.out_dim; ++o) {
      const float* wr = w + o * p.in_dim;
      double acc = 0.0;
      for (std::size_t i = 0; i < p.in_dim; ++i) acc += static_cast<double>(wr[i]) * xr[i];
      if (bias) acc += bias->data()[o];
      out(b, o) = static_cast<float>(acc);
    }
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b, const std::string& id) {
  if (a.dims() != b.dims()) {
    throw ShapeError("layer '" + id + "': add operands differ: " + format_dims(a.dims()) +
                     " vs " + format_dims(b.dims()));
  }
  Tensor out = a;
  auto o = out.data();
  const auto r = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += r[i];
  return out;
}

Tensor apply_layer(const ModelGraph& model, const LayerSpec& layer,
                   const std::vector<const Tensor*>& in) {
  const Tensor& x = *in[0];
  switch (layer.kind) {
    case LayerKind::conv2d:
      return conv2d(x, std::get<Conv2dParams>(layer.params), model.weight(layer.id, "weight"),
                    model.find_weight(layer.id, "bias"));
    case LayerKind::batchnorm:
      return batchnorm(x, std::get<BatchNormParams>(layer.params), model, layer.id);
    case LayerKind::relu:
      return relu(x);
    case LayerKind::maxpool:
      return maxpool(x, std::get<MaxPoolParams>(layer.params));
    case LayerKind::global_avgpool:
      return pixel_average(x);
    case LayerKind::linear:
      return linear(x, std::get<LinearParams>(layer.params), model.weight(layer.id, "weight"),
                    model.find_weight(layer.id, "bias"));
    case LayerKind::add:
      return add(x, *in[1], layer.id);
    case LayerKind::flatten:
      return x.reshaped({x.dim(0), x.size() / x.dim(0)});
  }
  throw ValidationError("layer '" + layer.id + "': unsupported kind");
}

// Evaluates nodes (start, end] given the batch at `start`; returns the values
// of the requested nodes. Intermediate values are dropped after their last use.
std::map<std::size_t, Tensor> run_nodes(const ModelGraph& model, std::size_t start,
                                        Tensor start_value, std::size_t end,
                                        const std::set<std::size_t>& wanted) {
  if (!is_valid_start(model, start, end)) {
    throw TopologyError("tap '" + model.node_name(start) +
                        "' lies inside a residual skip span that reaches past it; "
                        "choose a block-boundary tap");
  }
  const Tensor::Dims expect = with_batch(start_value.rank() ? start_value.dim(0) : 0,
                                         model.node_shape(start));
  if (start_value.dims() != expect) {
    throw ShapeError("features for tap '" + model.node_name(start) + "' have dims " +
                     format_dims(start_value.dims()) + ", expected " + format_dims(expect));
  }

  std::vector<std::size_t> last_use(model.node_count(), 0);
  for (std::size_t node = start + 1; node <= end; ++node)
    for (std::size_t in : model.node_inputs(node)) last_use[in] = std::max(last_use[in], node);

  std::vector<std::optional<Tensor>> values(model.node_count());
  values[start] = std::move(start_value);
  std::map<std::size_t, Tensor> out;
  if (wanted.count(start)) out[start] = *values[start];

  for (std::size_t node = start + 1; node <= end; ++node) {
    const LayerSpec& layer = model.layers()[node - 1];
    std::vector<const Tensor*> in;
    for (std::size_t src : model.node_inputs(node)) in.push_back(&*values[src]);
    values[node] = apply_layer(model, layer, in);
    if (wanted.count(node)) out[node] = *values[node];
    for (std::size_t src : model.node_inputs(node))
      if (last_use[src] == node) values[src].reset();
  }
  return out;
}

void append_rows(std::vector<float>& dst, const Tensor& src) {
  dst.insert(dst.end(), src.data().begin(), src.data().end());
}

}  // namespace

Tensor normalize_images(const ModelGraph& model, const DatasetBlob& images,
                        std::span<const std::size_t> indices) {
  const InputSpec& in = model.input();
  if (images.channels != in.channels || images.height != in.height || images.width != in.width) {
    throw ValidationError("dataset '" + images.name + "' images are " +
                          std::to_string(images.height) + "x" + std::to_string(images.width) +
                          "x" + std::to_string(images.channels) + ", model expects " +
                          std::to_string(in.height) + "x" + std::to_string(in.width) + "x" +
                          std::to_string(in.channels));
  }
  const Normalization& norm = model.normalization();
  const std::size_t hw = in.height * in.width;
  Tensor out({indices.size(), in.channels, in.height, in.width});
  auto o = out.data();
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto img = images.image(indices[b]);
    for (std::size_t p = 0; p < hw; ++p) {
      for (std::size_t c = 0; c < in.channels; ++c) {
        const double v = (img[p * in.channels + c] * norm.scale - norm.mean[c]) / norm.stddev[c];
        o[(b * in.channels + c) * hw + p] = static_cast<float>(v);
      }
    }
  }
  return out;
}

ForwardResult forward_tensor(const ModelGraph& model, const Tensor& input,
                             std::span<const TapPoint> taps) {
  std::set<std::size_t> wanted;
  std::vector<std::size_t> tap_nodes;
  for (const TapPoint& t : taps) {
    tap_nodes.push_back(model.node_of(t.layer_id));
    wanted.insert(tap_nodes.back());
  }
  const std::size_t last = model.node_count() - 1;
  wanted.insert(last);
  auto values = run_nodes(model, 0, input, last, wanted);
  ForwardResult result;
  result.logits = values.at(last);
  for (std::size_t i = 0; i < taps.size(); ++i) {
    const Tensor& act = values.at(tap_nodes[i]);
    result.features.push_back({taps[i], act, pixel_average(act)});
  }
  return result;
}

ForwardResult forward(const ModelGraph& model, const DatasetBlob& images,
                      std::span<const TapPoint> taps, const ForwardOptions& options) {
  std::vector<std::size_t> all;
  std::span<const std::size_t> indices = options.indices;
  if (indices.empty()) {
    all.resize(images.count);
    for (std::size_t i = 0; i < images.count; ++i) all[i] = i;
    indices = all;
  }
  if (indices.empty()) throw ValidationError("forward: dataset '" + images.name + "' is empty");
  for (const TapPoint& t : taps) model.node_of(t.layer_id);
  const std::size_t batch_size = std::max<std::size_t>(1, options.batch_size);

  std::vector<float> logits;
  std::vector<std::vector<float>> acts(taps.size()), avgs(taps.size());
  for (std::size_t begin = 0; begin < indices.size(); begin += batch_size) {
    const auto chunk = indices.subspan(begin, std::min(batch_size, indices.size() - begin));
    ForwardResult part = forward_tensor(model, normalize_images(model, images, chunk), taps);
    append_rows(logits, part.logits);
    for (std::size_t t = 0; t < taps.size(); ++t) {
      append_rows(acts[t], part.features[t].activations);
      append_rows(avgs[t], part.features[t].pixel_avg);
    }
  }

  const std::size_t n = indices.size();
  ForwardResult result;
  result.logits = Tensor({n, model.class_count()}, std::move(logits));
  for (std::size_t t = 0; t < taps.size(); ++t) {
    const std::size_t node = model.node_of(taps[t].layer_id);
    const Tensor::Dims& shape = model.node_shape(node);
    result.features.push_back({taps[t], Tensor(with_batch(n, shape), std::move(acts[t])),
                               Tensor({n, shape[0]}, std::move(avgs[t]))});
  }
  return result;
}

bool is_valid_start(const ModelGraph& model, std::size_t node, std::size_t end_node) {
  for (std::size_t j = node + 1; j <= end_node && j < model.node_count(); ++j)
    for (std::size_t in : model.node_inputs(j))
      if (in < node) return false;
  return true;
}

bool is_block_boundary(const ModelGraph& model, std::size_t node) {
  return is_valid_start(model, node, model.node_count() - 1);
}

std::vector<Tensor> forward_from(const ModelGraph& model, const TapPoint& start,
                                 const Tensor& features, std::span<const TapPoint> ends) {
  const std::size_t s = model.node_of(start.layer_id);
  std::set<std::size_t> wanted;
  std::size_t last = s;
  for (const TapPoint& e : ends) {
    const std::size_t node = model.node_of(e.layer_id);
    if (node < s) {
      throw ValidationError("end tap '" + e.layer_id + "' precedes start tap '" +
                            start.layer_id + "'");
    }
    wanted.insert(node);
    last = std::max(last, node);
  }
  auto values = run_nodes(model, s, features, last, wanted);
  std::vector<Tensor> out;
  for (const TapPoint& e : ends) out.push_back(values.at(model.node_of(e.layer_id)));
  return out;
}

Tensor forward_from(const ModelGraph& model, const TapPoint& start, const Tensor& features,
                    const TapPoint& end) {
  const TapPoint ends[] = {end};
  return std::move(forward_from(model, start, features, ends).front());
}

Tensor weight_matrix(const ModelGraph& model, const std::string& layer_id) {
  const LayerSpec& layer = model.layer(layer_id);
  if (!layer.weighted()) {
    throw ValidationError("layer '" + layer_id + "' is " + std::string(to_string(layer.kind)) +
                          ", expected conv2d or linear");
  }
  const Tensor& w = model.weight(layer_id, "weight");
  const std::size_t rows = w.dim(0);
  return w.reshaped({rows, w.size() / rows});
}

ModelGraph truncate_weights(const ModelGraph& model, double epsilon) {
  if (!(epsilon >= 0.0)) throw DomainError("truncation epsilon must be nonnegative");
  if (epsilon == 0.0) return model;
  std::map<std::string, WeightSet> replaced;
  for (const std::string& id : model.weighted_layer_ids()) {
    const Tensor& w = model.weight(id, "weight");
    const Svd f = svd(weight_matrix(model, id));
    const std::size_t r = relative_cut_rank(f.s, epsilon);
    bool lossless = true;
    for (Eigen::Index k = static_cast<Eigen::Index>(r); k < f.s.size(); ++k)
      lossless = lossless && f.s(k) == 0.0;
    if (lossless) continue;
    const Eigen::Index rr = static_cast<Eigen::Index>(r);
    const Eigen::MatrixXd rec = f.u.leftCols(rr) * f.s.head(rr).asDiagonal() * f.vt.topRows(rr);
    replaced[id]["weight"] = from_matrix(rec).reshaped(w.dims());
  }
  return model.with_weights(replaced);
}

Tensor forward_truncated(const ModelGraph& model, double epsilon, const DatasetBlob& images,
                         const ForwardOptions& options) {
  return forward(truncate_weights(model, epsilon), images, {}, options).logits;
}

Tensor pixel_average(const Tensor& activations) {
  if (activations.rank() == 2) return activations;
  if (activations.rank() != 4) {
    throw ShapeError("pixel_average expects [B,C,H,W] or [B,D], got " +
                     format_dims(activations.dims()));
  }
  const std::size_t batch = activations.dim(0), ch = activations.dim(1);
  const std::size_t spatial = activations.dim(2) * activations.dim(3);
  Tensor out({batch, ch});
  const auto in = activations.data();
  for (std::size_t bc = 0; bc < batch * ch; ++bc) {
    double sum = 0.0;
    for (std::size_t s = 0; s < spatial; ++s) sum += in[bc * spatial + s];
    out.data()[bc] = static_cast<float>(sum / static_cast<double>(spatial));
  }
  return out;
}

Tensor extract_patches(const Tensor& input, const Conv2dParams& p) {
  if (input.rank() != 4 || input.dim(1) != p.in_ch) {
    throw ShapeError("extract_patches expects [B," + std::to_string(p.in_ch) + ",H,W], got " +
                     format_dims(input.dims()));
  }
  const std::size_t batch = input.dim(0), h = input.dim(2), w = input.dim(3);
  if (h + 2 * p.pad < p.kh || w + 2 * p.pad < p.kw || p.stride == 0)
    throw ShapeError("extract_patches: kernel does not fit padded input " + format_dims(input.dims()));
  const std::size_t ho = (h + 2 * p.pad - p.kh) / p.stride + 1;
  const std::size_t wo = (w + 2 * p.pad - p.kw) / p.stride + 1;
  const std::size_t k = p.in_ch * p.kh * p.kw;
  Tensor out({batch, ho * wo, k});
  const auto in = input.data();
  auto o = out.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t y = 0; y < ho; ++y) {
      for (std::size_t x = 0; x < wo; ++x) {
        float* row = o.data() + ((b * ho + y) * wo + x) * k;
        for (std::size_t c = 0; c < p.in_ch; ++c) {
          const float* plane = in.data() + (b * p.in_ch + c) * h * w;
          for (std::size_t i = 0; i < p.kh; ++i) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * p.stride + i) -
                                      static_cast<std::ptrdiff_t>(p.pad);
            for (std::size_t j = 0; j < p.kw; ++j) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x * p.stride + j) -
                                        static_cast<std::ptrdiff_t>(p.pad);
              const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(h) &&
                                  ix < static_cast<std::ptrdiff_t>(w);
              row[(c * p.kh + i) * p.kw + j] =
                  inside ? plane[static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)] : 0.0f;
            }
          }
        }
      }
    }
  }
  return out;
}

std::string post_activation_tap(const ModelGraph& model, const std::string& layer_id) {
  std::size_t node = model.node_of(layer_id);
  const auto& layers = model.layers();
  while (node < layers.size()) {
    const LayerSpec& next = layers[node];  // produces node + 1
    const bool chained = model.node_inputs(node + 1).front() == node;
    const bool activation_like = next.kind == LayerKind::batchnorm ||
                                 next.kind == LayerKind::relu || next.kind == LayerKind::add;
    if (!chained || !activation_like) break;
    ++node;
  }
  return model.node_name(node);
}

std::string input_tap(const ModelGraph& model, const std::string& layer_id) {
  return model.node_name(model.node_inputs(model.node_of(layer_id)).front());
}

}  // namespace nnspec
