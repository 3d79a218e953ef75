#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "nnspec/model_io.hpp"
#include "nnspec/tensor.hpp"

namespace nnspec {

// Features are always read after the named layer has run, so a tap on a relu
// sees post-activation values. "input" names the normalized image.
inline constexpr std::string_view kTapPosition = "post_activation";

struct TapPoint {
  std::string layer_id;
  bool operator==(const TapPoint&) const = default;
};

struct FeatureBatch {
  TapPoint tap;
  Tensor activations;  // [B, C, H, W] or [B, D]
  Tensor pixel_avg;    // [B, C]; a copy of activations when already [B, D]
};

struct ForwardOptions {
  std::size_t batch_size = 256;
  // Samples to evaluate, in order; empty means every sample.
  std::span<const std::size_t> indices;
};

struct ForwardResult {
  Tensor logits;  // [B, K]
  std::vector<FeatureBatch> features;
};

// [B, C, H, W] model input from raw bytes, normalized per channel.
Tensor normalize_images(const ModelGraph& model, const DatasetBlob& images,
                        std::span<const std::size_t> indices);

ForwardResult forward(const ModelGraph& model, const DatasetBlob& images,
                      std::span<const TapPoint> taps, const ForwardOptions& options = {});

// Same, starting from an already-normalized [B, C, H, W] batch.
ForwardResult forward_tensor(const ModelGraph& model, const Tensor& input,
                             std::span<const TapPoint> taps);

// Propagates a batch of features captured at `start` on to `end`. Throws
// TopologyError when a layer after `start` reads a node that precedes it (the
// start sits inside a residual skip span).
Tensor forward_from(const ModelGraph& model, const TapPoint& start, const Tensor& features,
                    const TapPoint& end);
std::vector<Tensor> forward_from(const ModelGraph& model, const TapPoint& start,
                                 const Tensor& features, std::span<const TapPoint> ends);

// True when every layer after `node` up to `end_node` consumes only nodes at
// or after `node`.
bool is_valid_start(const ModelGraph& model, std::size_t node, std::size_t end_node);
// Valid start for the whole remainder of the network.
bool is_block_boundary(const ModelGraph& model, std::size_t node);

// Copy of the model whose conv2d/linear weights are replaced by their rank-
// truncated reconstruction (singular values with s_k / s_0 < epsilon dropped).
// Weights whose dropped singular values are all zero are left untouched, so
// epsilon = 0 returns the original weights bit for bit.
ModelGraph truncate_weights(const ModelGraph& model, double epsilon);

Tensor forward_truncated(const ModelGraph& model, double epsilon, const DatasetBlob& images,
                         const ForwardOptions& options = {});

// Kernel of a conv2d or linear layer as a matrix: [out, in * kh * kw] for conv
// (a pure re-layout of [out, in, kh, kw]) and [out, in] for linear.
Tensor weight_matrix(const ModelGraph& model, const std::string& layer_id);

// Spatial mean: [B, C, H, W] -> [B, C]; [B, D] is returned unchanged.
Tensor pixel_average(const Tensor& activations);

// im2col for one conv geometry: [B, C, H, W] -> [B, P, C * kh * kw] where
// P = Ho * Wo in row-major output order and the patch index is
// c * kh * kw + i * kw + j. Padding reads as zero.
Tensor extract_patches(const Tensor& input, const Conv2dParams& conv);

// The post-activation tap that belongs to a weighted layer: the layer itself
// followed by any directly chained batchnorm, add, and relu layers.
std::string post_activation_tap(const ModelGraph& model, const std::string& layer_id);

// The node feeding a layer's primary input, as a tap id.
std::string input_tap(const ModelGraph& model, const std::string& layer_id);

}  // namespace nnspec
