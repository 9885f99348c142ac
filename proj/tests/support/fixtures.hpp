// Copyright (c) 2026, prednet authors
// SPDX-License-Identifier: Apache-2.0

// Small datasets and hand-constructed networks shared by several suites.

#pragma once

#include <cstddef>
#include <cstdint>

#include "prednet/attrnet.hpp"
#include "prednet/dataset.hpp"

namespace prednet::testing {

inline data::dataset_config tiny_config(std::size_t count = 48, std::size_t train = 32, std::size_t side = 8,
                                        std::uint64_t seed = 7) {
  data::dataset_config c;
  c.attributes = 8;
  c.height = side;
  c.width = side;
  c.count = count;
  c.train_count = train;
  c.seed = seed;
  return c;
}

inline const data::dataset& tiny_dataset() {
  static const data::dataset d = data::build_dataset(tiny_config());
  return d;
}

/// Makes feature channel `copy` an exact duplicate of `source`, and gives it an identical mask row in every head.
inline void duplicate_channel(attrnet& net, std::size_t source, std::size_t copy) {
  auto& b = net.blocks.back();
  const std::size_t fan_in = b.weight.size() / feature_channels;
  for (std::size_t i = 0; i < fan_in; ++i) b.weight[copy * fan_in + i] = b.weight[source * fan_in + i];
  b.bias[copy] = b.bias[source];
  b.gamma[copy] = b.gamma[source];
  b.beta[copy] = b.beta[source];
  b.stats.running_mean[copy] = b.stats.running_mean[source];
  b.stats.running_var[copy] = b.stats.running_var[source];
  for (auto& h : net.heads) {
    for (std::size_t i = 0; i < feature_channels; ++i) {
      h.mask_weight[copy * feature_channels + i] = h.mask_weight[source * feature_channels + i];
    }
    h.mask_bias[copy] = h.mask_bias[source];
  }
}

/// Disconnects channel c from every head: no classifier weight reads it and no mask logit depends on it.
inline void disconnect_channel(attrnet& net, std::size_t c) {
  for (auto& h : net.heads) {
    h.classifier_weight[c] = 0.0f;
    for (std::size_t o = 0; o < feature_channels; ++o) h.mask_weight[o * feature_channels + c] = 0.0f;
  }
}

/// A freshly initialised network whose batch-norm running stats are non-trivial.
inline attrnet random_net(std::size_t attributes = 8, std::uint64_t seed = 3) {
  std::vector<std::string> names;
  for (std::size_t k = 0; k < attributes; ++k) names.push_back("a" + std::to_string(k));
  auto net = attrnet::create(names, seed);
  std::uint64_t s = seed;
  for (auto& b : net.blocks) {
    for (std::size_t c = 0; c < b.stats.running_mean.size(); ++c) {
      s = s * 6364136223846793005ULL + 1442695040888963407ULL;
      b.stats.running_mean[c] = static_cast<float>(static_cast<double>(s >> 40) / double(1 << 24) - 0.5) * 0.2f;
      b.stats.running_var[c] = 0.5f + static_cast<float>(static_cast<double>(s >> 40) / double(1 << 24));
    }
  }
  return net;
}

}  // namespace prednet::testing
