// Copyright (c) 2026, prednet authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "prednet/kernels.hpp"
#include "prednet/tape.hpp"
#include "prednet/tensor.hpp"

namespace prednet {

/// Width of the shared feature map, of every attention mask and of the channel gate.
inline constexpr std::size_t feature_channels = 128;
inline constexpr double leaky_slope = 0.01;

struct conv_block_layout {
  std::size_t in_channels;
  std::size_t out_channels;
  std::size_t padding;
  std::size_t dilation;
};

/// Dilated extractor: 3x3 kernels, stride 1, padding == dilation so H x W is preserved.
inline constexpr std::array<conv_block_layout, 4> extractor_layout{{
    {3, 32, 1, 1},
    {32, 64, 2, 2},
    {64, 64, 3, 3},
    {64, 128, 2, 2},
}};

template <typename T>
struct conv_block {
  basic_tensor<T> weight;  // O x I x 3 x 3
  basic_tensor<T> bias;    // O
  basic_tensor<T> gamma;   // O
  basic_tensor<T> beta;    // O
  kernels::batch_norm_state<T> stats;
  kernels::conv_geometry geometry;
};

/// Per-attribute branch: 1x1 conv mask generator + linear classifier on the pooled masked features.
template <typename T>
struct attention_head {
  basic_tensor<T> mask_weight;        // 128 x 128 x 1 x 1
  basic_tensor<T> mask_bias;          // 128
  basic_tensor<T> classifier_weight;  // 1 x 128
  basic_tensor<T> classifier_bias;    // 1
};

struct training_metadata {
  double lambda = 0.0;
  std::uint64_t seed = 0;
  std::uint64_t epochs = 0;

  friend bool operator==(const training_metadata&, const training_metadata&) = default;
};

template <typename T>
struct named_tensor {
  std::string name;
  basic_tensor<T>* tensor;
};

/**
 * Multi-attribute classifier: a shared dilated feature extractor followed by
 * K attention heads. The channel gate multiplies the feature map channelwise
 * (1 = active, 0 = pruned) before any head sees it.
 */
template <typename T>
class basic_attrnet {
 public:
  std::array<conv_block<T>, 4> blocks;
  std::vector<attention_head<T>> heads;
  std::vector<std::string> attribute_names;
  std::vector<T> channel_gate = std::vector<T>(feature_channels, T{1});
  training_metadata metadata;

  /// Seeded fan-in scaled uniform init for weights, zero biases, unit BN scale.
  static basic_attrnet create(std::vector<std::string> names, std::uint64_t seed) {
    if (names.empty()) throw argument_error("attrnet needs at least one attribute");
    basic_attrnet net;
    net.attribute_names = std::move(names);
    std::mt19937_64 rng(seed);
    auto uniform_fill = [&rng](basic_tensor<T>& t, double bound) {
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (auto& v : t.data()) v = static_cast<T>(dist(rng));
    };
    const double gain = std::sqrt(2.0 / (1.0 + leaky_slope * leaky_slope));
    for (std::size_t i = 0; i < extractor_layout.size(); ++i) {
      const auto& l = extractor_layout[i];
      auto& b = net.blocks[i];
      b.weight = basic_tensor<T>({l.out_channels, l.in_channels, 3, 3});
      uniform_fill(b.weight, gain * std::sqrt(3.0 / static_cast<double>(l.in_channels * 9)));
      b.bias = basic_tensor<T>::zeros({l.out_channels});
      b.gamma = basic_tensor<T>::ones({l.out_channels});
      b.beta = basic_tensor<T>::zeros({l.out_channels});
      b.stats = kernels::batch_norm_state<T>(l.out_channels);
      b.geometry = {1, l.padding, l.dilation};
    }
    const double head_bound = 1.0 / std::sqrt(static_cast<double>(feature_channels));
    net.heads.resize(net.attribute_names.size());
    for (auto& h : net.heads) {
      h.mask_weight = basic_tensor<T>({feature_channels, feature_channels, 1, 1});
      uniform_fill(h.mask_weight, head_bound);
      h.mask_bias = basic_tensor<T>::zeros({feature_channels});
      h.classifier_weight = basic_tensor<T>({1, feature_channels});
      uniform_fill(h.classifier_weight, head_bound);
      h.classifier_bias = basic_tensor<T>::zeros({1});
    }
    net.metadata.seed = seed;
    return net;
  }

  std::size_t attribute_count() const noexcept { return heads.size(); }

  /// Trainable tensors in canonical order.
  std::vector<named_tensor<T>> parameters() {
    std::vector<named_tensor<T>> out;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const std::string p = "extractor." + std::to_string(i) + ".";
      out.push_back({p + "conv.weight", &blocks[i].weight});
      out.push_back({p + "conv.bias", &blocks[i].bias});
      out.push_back({p + "bn.gamma", &blocks[i].gamma});
      out.push_back({p + "bn.beta", &blocks[i].beta});
    }
    for (std::size_t k = 0; k < heads.size(); ++k) {
      const std::string p = "head." + std::to_string(k) + ".";
      out.push_back({p + "mask.weight", &heads[k].mask_weight});
      out.push_back({p + "mask.bias", &heads[k].mask_bias});
      out.push_back({p + "classifier.weight", &heads[k].classifier_weight});
      out.push_back({p + "classifier.bias", &heads[k].classifier_bias});
    }
    return out;
  }

  template <typename U>
  basic_attrnet<U> cast() const {
    basic_attrnet<U> out;
    auto vec = [](const std::vector<T>& v) { return std::vector<U>(v.begin(), v.end()); };
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const auto& b = blocks[i];
      auto& o = out.blocks[i];
      o.weight = b.weight.template cast<U>();
      o.bias = b.bias.template cast<U>();
      o.gamma = b.gamma.template cast<U>();
      o.beta = b.beta.template cast<U>();
      o.stats.running_mean = vec(b.stats.running_mean);
      o.stats.running_var = vec(b.stats.running_var);
      o.geometry = b.geometry;
    }
    out.heads.resize(heads.size());
    for (std::size_t k = 0; k < heads.size(); ++k) {
      out.heads[k].mask_weight = heads[k].mask_weight.template cast<U>();
      out.heads[k].mask_bias = heads[k].mask_bias.template cast<U>();
      out.heads[k].classifier_weight = heads[k].classifier_weight.template cast<U>();
      out.heads[k].classifier_bias = heads[k].classifier_bias.template cast<U>();
    }
    out.attribute_names = attribute_names;
    out.channel_gate = vec(channel_gate);
    out.metadata = metadata;
    return out;
  }
};

using attrnet = basic_attrnet<float>;

// ---- graph construction on a tape -------------------------------------------

struct block_vars {
  var weight, bias, gamma, beta;
};

struct head_vars {
  var mask_weight, mask_bias, classifier_weight, classifier_bias;
};

/// The network's tensors placed on a tape, either as trainable leaves or constants.
struct bound_attrnet {
  std::array<block_vars, 4> blocks;
  std::vector<head_vars> heads;

  /// Vars in the same order as basic_attrnet::parameters().
  std::vector<var> ordered() const {
    std::vector<var> out;
    for (const auto& b : blocks) out.insert(out.end(), {b.weight, b.bias, b.gamma, b.beta});
    for (const auto& h : heads) out.insert(out.end(), {h.mask_weight, h.mask_bias, h.classifier_weight, h.classifier_bias});
    return out;
  }
};

template <typename T>
bound_attrnet bind_network(basic_tape<T>& tape, const basic_attrnet<T>& net, bool trainable) {
  auto put = [&](const basic_tensor<T>& t) { return trainable ? tape.parameter(t) : tape.constant(t); };
  bound_attrnet b;
  for (std::size_t i = 0; i < net.blocks.size(); ++i) {
    const auto& blk = net.blocks[i];
    b.blocks[i] = {put(blk.weight), put(blk.bias), put(blk.gamma), put(blk.beta)};
  }
  for (const auto& h : net.heads) {
    b.heads.push_back({put(h.mask_weight), put(h.mask_bias), put(h.classifier_weight), put(h.classifier_bias)});
  }
  return b;
}

/// Runs the extractor and applies the channel gate. `stats` supplies the BN
/// state per block; train mode updates it in place.
template <typename T>
var extract_features(basic_tape<T>& tape, const basic_attrnet<T>& net, const bound_attrnet& vars, var images,
                     kernels::norm_mode mode, std::array<kernels::batch_norm_state<T>*, 4> stats) {
  const auto& x = tape.value(images);
  if (x.rank() != 4 || x.dim(1) != extractor_layout.front().in_channels) {
    throw dimension_error("feature extractor expects N x 3 x H x W input, got " + to_string(x.shape()));
  }
  var h = images;
  for (std::size_t i = 0; i < net.blocks.size(); ++i) {
    const auto& v = vars.blocks[i];
    h = tape.conv2d(h, v.weight, v.bias, net.blocks[i].geometry);
    h = tape.batch_norm(h, v.gamma, v.beta, *stats[i], mode);
    h = tape.leaky_relu(h, static_cast<T>(leaky_slope));
  }
  return tape.channel_gate(h, net.channel_gate);
}

struct head_output {
  var mask;            // M^k, sigmoid output
  var applied_mask;    // g(M^k) when a transform is active, else M^k
  var probability;     // N x 1
};

template <typename T>
var head_mask(basic_tape<T>& tape, const head_vars& h, var features) {
  return tape.sigmoid(tape.conv2d(features, h.mask_weight, h.mask_bias, kernels::conv_geometry{1, 0, 1}));
}

/// sigmoid(w . GAP(mask (x) features) + b)
template <typename T>
var head_classify(basic_tape<T>& tape, const head_vars& h, var features, var mask) {
  var pooled = tape.global_average_pool(tape.mul(mask, features));
  return tape.sigmoid(tape.linear(pooled, h.classifier_weight, h.classifier_bias));
}

template <typename T>
head_output run_head(basic_tape<T>& tape, const head_vars& h, var features,
                     const std::optional<mask_transform_params>& transform) {
  head_output out;
  out.mask = head_mask(tape, h, features);
  out.applied_mask = transform ? tape.mask_transform(out.mask, *transform) : out.mask;
  out.probability = head_classify(tape, h, features, out.applied_mask);
  return out;
}

struct network_output {
  var features;
  std::vector<head_output> heads;
  var probabilities;  // N x K
};

template <typename T>
network_output run_network(basic_tape<T>& tape, const basic_attrnet<T>& net, const bound_attrnet& vars, var images,
                           kernels::norm_mode mode, std::array<kernels::batch_norm_state<T>*, 4> stats,
                           const std::optional<mask_transform_params>& transform = std::nullopt) {
  network_output out;
  out.features = extract_features(tape, net, vars, images, mode, stats);
  std::vector<var> columns;
  for (const auto& h : vars.heads) {
    out.heads.push_back(run_head(tape, h, out.features, transform));
    columns.push_back(out.heads.back().probability);
  }
  out.probabilities = tape.concat_columns(columns);
  return out;
}

namespace detail {

template <typename T>
struct eval_stats {
  std::array<kernels::batch_norm_state<T>, 4> copies;
  std::array<kernels::batch_norm_state<T>*, 4> ptrs;

  explicit eval_stats(const basic_attrnet<T>& net) {
    for (std::size_t i = 0; i < 4; ++i) {
      copies[i] = net.blocks[i].stats;
      ptrs[i] = &copies[i];
    }
  }
};

template <typename T>
void check_head_index(const basic_attrnet<T>& net, std::size_t k) {
  if (k >= net.attribute_count()) {
    throw argument_error("attribute index " + std::to_string(k) + " out of range (K=" +
                         std::to_string(net.attribute_count()) + ")");
  }
}

}  // namespace detail

// ---- inference API (eval-mode batch norm, no gradients) ----------------------

template <typename T>
basic_tensor<T> forward_features(const basic_attrnet<T>& net, const basic_tensor<T>& images) {
  basic_tape<T> tape(false);
  detail::eval_stats<T> stats(net);
  const auto vars = bind_network(tape, net, false);
  var f = extract_features(tape, net, vars, tape.constant(images), kernels::norm_mode::eval, stats.ptrs);
  return tape.value(f);
}

template <typename T>
basic_tensor<T> compute_mask(const basic_attrnet<T>& net, const basic_tensor<T>& features, std::size_t k) {
  detail::check_head_index(net, k);
  basic_tape<T> tape(false);
  const auto vars = bind_network(tape, net, false);
  return tape.value(head_mask(tape, vars.heads[k], tape.constant(features)));
}

/// Probabilities (length N) of attribute k given features and a mask of the same shape.
template <typename T>
basic_tensor<T> classify(const basic_attrnet<T>& net, const basic_tensor<T>& features, const basic_tensor<T>& mask,
                         std::size_t k) {
  detail::check_head_index(net, k);
  require_same_shape(features, mask, "classify");
  if (features.rank() != 4 || features.dim(1) != feature_channels) {
    throw dimension_error("classify expects N x 128 x H x W features");
  }
  basic_tape<T> tape(false);
  const auto vars = bind_network(tape, net, false);
  var p = head_classify(tape, vars.heads[k], tape.constant(features), tape.constant(mask));
  return tape.value(p).reshaped({features.dim(0)});
}

/// N x K probabilities sharing one extractor pass. An optional transform is
/// applied to every mask before the elementwise product.
template <typename T>
basic_tensor<T> forward_all(const basic_attrnet<T>& net, const basic_tensor<T>& images,
                            const std::optional<mask_transform_params>& transform = std::nullopt) {
  basic_tape<T> tape(false);
  detail::eval_stats<T> stats(net);
  const auto vars = bind_network(tape, net, false);
  auto out = run_network(tape, net, vars, tape.constant(images), kernels::norm_mode::eval, stats.ptrs, transform);
  return tape.value(out.probabilities);
}

}  // namespace prednet
