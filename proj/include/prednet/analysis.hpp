// Copyright (c) 2026, prednet authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "prednet/attrnet.hpp"
#include "prednet/dataset.hpp"
#include "prednet/errors.hpp"
#include "prednet/tape.hpp"

namespace prednet {

/// A[k][c]: mean of mask k's channel c over samples and spatial positions.
struct mask_stats {
  std::size_t attributes = 0;
  std::size_t channels = 0;
  std::size_t samples = 0;
  std::vector<double> values;  // row-major K x C

  double at(std::size_t k, std::size_t c) const { return values.at(k * channels + c); }
};

enum class correlation_axis { channel, attribute };

inline std::string to_string(correlation_axis a) { return a == correlation_axis::channel ? "channel" : "attribute"; }

/// Symmetric Pearson matrix. Entries involving a zero-variance signal are
/// marked undefined and hold NaN rather than a made-up number.
struct correlation_matrix {
  correlation_axis axis = correlation_axis::channel;
  std::size_t size = 0;
  std::vector<double> values;
  std::vector<std::uint8_t> defined_flags;
  std::vector<std::string> labels;

  double at(std::size_t i, std::size_t j) const { return values.at(i * size + j); }
  bool defined(std::size_t i, std::size_t j) const { return defined_flags.at(i * size + j) != 0; }
};

struct ranked_attribute {
  std::size_t index = 0;
  std::string name;
  double coefficient = 0.0;
  bool defined = true;
};

/// Mean-mask matrix over the first min(sample_limit, records.size()) records, in record order.
inline mask_stats mean_mask_matrix(const attrnet& net, std::span<const data::sample_record> records,
                                   std::size_t sample_limit = 512, std::size_t chunk = 32) {
  if (records.empty()) throw argument_error("mean_mask_matrix needs a non-empty dataset");
  if (sample_limit < 1) throw argument_error("sample_limit must be >= 1");
  const std::size_t n = std::min(sample_limit, records.size());
  const std::size_t k_count = net.attribute_count(), c_count = feature_channels;
  mask_stats out{k_count, c_count, n, std::vector<double>(k_count * c_count, 0.0)};
  std::size_t plane = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < n; start += chunk) {
    idx.clear();
    for (std::size_t i = start; i < std::min(n, start + chunk); ++i) idx.push_back(i);
    const auto features = forward_features(net, data::make_image_batch(records, idx));
    plane = features.dim(2) * features.dim(3);
    for (std::size_t k = 0; k < k_count; ++k) {
      const auto mask = compute_mask(net, features, k);
      for (std::size_t s = 0; s < idx.size(); ++s)
        for (std::size_t c = 0; c < c_count; ++c) {
          const float* p = mask.raw() + (s * c_count + c) * plane;
          double acc = 0.0;
          for (std::size_t i = 0; i < plane; ++i) acc += p[i];
          out.values[k * c_count + c] += acc;
        }
    }
  }
  for (double& v : out.values) v /= static_cast<double>(n * plane);
  return out;
}

namespace detail {

/// Pearson correlation between the rows of a row-major `rows x len` matrix.
inline correlation_matrix row_correlation(const std::vector<double>& m, std::size_t rows, std::size_t len,
                                          correlation_axis axis) {
  correlation_matrix out;
  out.axis = axis;
  out.size = rows;
  out.values.assign(rows * rows, std::numeric_limits<double>::quiet_NaN());
  out.defined_flags.assign(rows * rows, 0);

  std::vector<double> centered(rows * len), norm(rows);
  std::vector<bool> usable(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = m.data() + r * len;
    double mean = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < len; ++i) mean += x[i];
    mean /= static_cast<double>(len);
    double ss = 0.0;
    for (std::size_t i = 0; i < len; ++i) {
      centered[r * len + i] = x[i] - mean;
      ss += centered[r * len + i] * centered[r * len + i];
      scale = std::max(scale, std::abs(x[i]));
    }
    // Rounding of the mean leaves ~1e-32 relative residue on constant signals.
    usable[r] = ss > 1e-24 * std::max(scale * scale, 1e-300) * static_cast<double>(len);
    norm[r] = std::sqrt(ss);
  }
  for (std::size_t a = 0; a < rows; ++a) {
    for (std::size_t b = a; b < rows; ++b) {
      if (!usable[a] || !usable[b]) continue;
      double r = 1.0;
      if (a != b) {
        double dot = 0.0;
        for (std::size_t i = 0; i < len; ++i) dot += centered[a * len + i] * centered[b * len + i];
        r = std::clamp(dot / (norm[a] * norm[b]), -1.0, 1.0);
      }
      out.values[a * rows + b] = out.values[b * rows + a] = r;
      out.defined_flags[a * rows + b] = out.defined_flags[b * rows + a] = 1;
    }
  }
  return out;
}

}  // namespace detail

/// C x C correlation of the channels' K-dimensional per-attribute signatures (columns of A).
inline correlation_matrix channel_correlation(const mask_stats& stats) {
  if (stats.attributes < 2) throw argument_error("channel correlation needs K >= 2");
  std::vector<double> transposed(stats.values.size());
  for (std::size_t k = 0; k < stats.attributes; ++k)
    for (std::size_t c = 0; c < stats.channels; ++c)
      transposed[c * stats.attributes + k] = stats.values[k * stats.channels + c];
  auto out = detail::row_correlation(transposed, stats.channels, stats.attributes, correlation_axis::channel);
  for (std::size_t c = 0; c < stats.channels; ++c) out.labels.push_back("ch" + std::to_string(c));
  return out;
}

/// K x K correlation of the attributes' 128-dimensional mean-mask rows.
inline correlation_matrix attribute_correlation(const mask_stats& stats,
                                                const std::vector<std::string>& names = {}) {
  if (stats.channels < 2) throw argument_error("attribute correlation needs C >= 2");
  auto out = detail::row_correlation(stats.values, stats.attributes, stats.channels, correlation_axis::attribute);
  for (std::size_t k = 0; k < stats.attributes; ++k) {
    out.labels.push_back(k < names.size() ? names[k] : "attr_" + std::to_string(k));
  }
  return out;
}

/// The n attributes most correlated with `target`, highest first, ties by index;
/// undefined entries rank after every defined one.
inline std::vector<ranked_attribute> top_correlated_attributes(const correlation_matrix& corr, std::size_t target,
                                                               std::size_t n) {
  if (target >= corr.size) throw argument_error("target attribute out of range");
  if (n >= corr.size) throw argument_error("n must be smaller than the number of attributes");
  std::vector<ranked_attribute> all;
  for (std::size_t j = 0; j < corr.size; ++j) {
    if (j == target) continue;
    all.push_back({j, j < corr.labels.size() ? corr.labels[j] : std::to_string(j), corr.at(target, j),
                   corr.defined(target, j)});
  }
  std::stable_sort(all.begin(), all.end(), [](const ranked_attribute& a, const ranked_attribute& b) {
    if (a.defined != b.defined) return a.defined;
    if (!a.defined) return false;
    return a.coefficient > b.coefficient;
  });
  all.resize(n);
  return all;
}

/// Per-pixel L2 norm over color channels of d p_k / d x for one image (1 x 3 x H x W); returns H x W.
template <typename T>
basic_tensor<T> sensitivity(const basic_attrnet<T>& net, const basic_tensor<T>& image, std::size_t k) {
  detail::check_head_index(net, k);
  if (image.rank() != 4 || image.dim(0) != 1 || image.dim(1) != 3) {
    throw dimension_error("sensitivity expects a single 1 x 3 x H x W image, got " + to_string(image.shape()));
  }
  basic_tape<T> tape;
  detail::eval_stats<T> stats(net);
  const auto vars = bind_network(tape, net, false);
  const var x = tape.parameter(image);
  const var features = extract_features(tape, net, vars, x, kernels::norm_mode::eval, stats.ptrs);
  const auto head = run_head(tape, vars.heads[k], features, std::nullopt);
  tape.backward(head.probability);
  const auto g = tape.grad(x);
  const std::size_t h = image.dim(2), w = image.dim(3), plane = h * w;
  basic_tensor<T> out({h, w});
  for (std::size_t p = 0; p < plane; ++p) {
    double ss = 0.0;
    for (std::size_t c = 0; c < 3; ++c) ss += static_cast<double>(g[c * plane + p]) * g[c * plane + p];
    out[p] = static_cast<T>(std::sqrt(ss));
  }
  return out;
}

/// CSV with a header row of column labels and a leading label column. Undefined entries are empty cells.
inline std::string matrix_csv(const std::vector<double>& values, std::size_t rows, std::size_t cols,
                              const std::vector<std::string>& row_labels, const std::vector<std::string>& col_labels,
                              const std::vector<std::uint8_t>* defined = nullptr) {
  std::ostringstream out;
  out.precision(10);
  out << "label";
  for (std::size_t c = 0; c < cols; ++c) out << ',' << col_labels.at(c);
  out << '\n';
  for (std::size_t r = 0; r < rows; ++r) {
    out << row_labels.at(r);
    for (std::size_t c = 0; c < cols; ++c) {
      out << ',';
      if (!defined || (*defined)[r * cols + c]) out << values[r * cols + c];
    }
    out << '\n';
  }
  return out.str();
}

inline std::string correlation_csv(const correlation_matrix& m) {
  return matrix_csv(m.values, m.size, m.size, m.labels, m.labels, &m.defined_flags);
}

inline std::string mask_stats_csv(const mask_stats& s, const std::vector<std::string>& names) {
  std::vector<std::string> cols;
  for (std::size_t c = 0; c < s.channels; ++c) cols.push_back("ch" + std::to_string(c));
  return matrix_csv(s.values, s.attributes, s.channels, names, cols);
}

}  // namespace prednet
