// Copyright (c) 2026, prednet authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "prednet/attrnet.hpp"
#include "prednet/dataset.hpp"
#include "prednet/errors.hpp"
#include "prednet/tape.hpp"

namespace prednet {

enum class optimizer_kind { sgd, momentum };

inline std::string to_string(optimizer_kind k) { return k == optimizer_kind::sgd ? "sgd" : "momentum"; }

inline optimizer_kind parse_optimizer(const std::string& s) {
  if (s == "sgd") return optimizer_kind::sgd;
  if (s == "momentum") return optimizer_kind::momentum;
  throw argument_error("unknown optimizer '" + s + "' (expected sgd or momentum)");
}

struct train_config {
  double lambda = 1e-5;
  double learning_rate = 0.05;
  double momentum = 0.9;
  std::size_t batch_size = 32;
  std::size_t epochs = 20;
  std::uint64_t seed = 1;
  optimizer_kind optimizer = optimizer_kind::momentum;

  void validate() const {
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw argument_error("lambda must be a finite value >= 0");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw argument_error("learning rate must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw argument_error("momentum must lie in [0, 1)");
    if (batch_size < 2) throw argument_error("batch size must be >= 2 (batch statistics need two samples)");
    if (epochs < 1) throw argument_error("epochs must be >= 1");
  }
};

/// total is always bce + lambda * mask_l1, evaluated in double from the two reported terms.
struct loss_breakdown {
  double bce = 0.0;
  double mask_l1 = 0.0;
  double total = 0.0;
};

struct epoch_record {
  std::size_t epoch = 0;  // 1-based
  loss_breakdown loss;     // mean over the epoch's minibatches
  double mean_accuracy = 0.0;
};

struct accuracy_report {
  std::vector<double> per_attribute;
  double mean = 0.0;
};

/// -(1/N) sum_i sum_k [y log p + (1-y) log(1-p)], predictions clamped to [eps, 1-eps].
template <typename T>
double binary_cross_entropy_sum(const basic_tensor<T>& predictions, const basic_tensor<T>& labels,
                                double eps = 1e-7) {
  basic_tape<T> tape(false);
  return tape.value(tape.binary_cross_entropy(tape.constant(predictions), labels, eps))[0];
}

namespace detail {

/// Mean over samples of the summed |M| of every head's mask, as a tape node.
template <typename T>
var mask_l1_node(basic_tape<T>& tape, const network_output& out, std::size_t batch) {
  var acc = tape.abs_sum(out.heads.front().mask);
  for (std::size_t k = 1; k < out.heads.size(); ++k) acc = tape.add(acc, tape.abs_sum(out.heads[k].mask));
  return tape.scale(acc, static_cast<T>(1.0 / static_cast<double>(batch)));
}

}  // namespace detail

/// Mask L1 penalty (per-sample mean of sum |M^k| over all heads) on an eval-mode pass.
template <typename T>
double mask_l1(const basic_attrnet<T>& net, const basic_tensor<T>& images) {
  basic_tape<T> tape(false);
  detail::eval_stats<T> stats(net);
  const auto vars = bind_network(tape, net, false);
  auto out = run_network(tape, net, vars, tape.constant(images), kernels::norm_mode::eval, stats.ptrs);
  double acc = 0.0;
  for (const auto& h : out.heads)
    for (T v : tape.value(h.mask).data()) acc += std::abs(static_cast<double>(v));
  return acc / static_cast<double>(images.dim(0));
}

/// Accuracy of thresholded predictions; a prediction equal to the threshold counts as positive.
template <typename T>
accuracy_report accuracy_from_predictions(const basic_tensor<T>& predictions, const basic_tensor<T>& labels,
                                          double threshold = 0.5) {
  require_same_shape(predictions, labels, "accuracy");
  const std::size_t n = predictions.dim(0), k = predictions.dim(1);
  accuracy_report r;
  r.per_attribute.assign(k, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      const bool positive = static_cast<double>(predictions[i * k + j]) >= threshold;
      if (positive == (labels[i * k + j] > T{0.5})) r.per_attribute[j] += 1.0;
    }
  for (auto& a : r.per_attribute) a /= static_cast<double>(n);
  for (double a : r.per_attribute) r.mean += a;
  r.mean /= static_cast<double>(k);
  return r;
}

/// Eval-mode predictions (N x K) for records, in chunks so memory stays bounded.
inline tensor predict(const attrnet& net, std::span<const data::sample_record> records,
                      const std::optional<mask_transform_params>& transform = std::nullopt,
                      std::size_t chunk = 64) {
  if (records.empty()) throw argument_error("predict needs at least one sample");
  const std::size_t n = records.size(), k = net.attribute_count();
  tensor out({n, k});
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < n; start += chunk) {
    idx.clear();
    for (std::size_t i = start; i < std::min(n, start + chunk); ++i) idx.push_back(i);
    const auto p = forward_all(net, data::make_image_batch(records, idx), transform);
    std::copy(p.data().begin(), p.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(start * k));
  }
  return out;
}

inline tensor labels_of(std::span<const data::sample_record> records) {
  std::vector<std::size_t> idx(records.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return data::make_label_batch(records, idx);
}

inline accuracy_report evaluate_accuracy(const attrnet& net, std::span<const data::sample_record> records,
                                         double threshold = 0.5) {
  return accuracy_from_predictions(predict(net, records), labels_of(records), threshold);
}

/**
 * Minibatch gradient descent on BCE + lambda * mask L1.
 *
 * The sample order of each epoch comes from shuffled_order(n, seed + epoch),
 * so a run is a pure function of (net, data, config). Batches smaller than
 * two samples are skipped because batch statistics are undefined for them.
 * When `eval` is given, the per-epoch accuracy is measured on it; otherwise
 * on the training records.
 */
class trainer {
 public:
  using epoch_callback = std::function<void(const epoch_record&)>;

  explicit trainer(train_config config) : config_(config) { config_.validate(); }

  const train_config& config() const noexcept { return config_; }

  std::vector<epoch_record> fit(attrnet& net, std::span<const data::sample_record> train,
                                std::span<const data::sample_record> eval = {},
                                const epoch_callback& on_epoch = {}) {
    if (train.size() < 2) throw argument_error("training needs at least two samples");
    if (train.front().labels.size() != net.attribute_count()) {
      throw dimension_error("dataset has " + std::to_string(train.front().labels.size()) +
                            " attributes but the network has " + std::to_string(net.attribute_count()));
    }
    auto params = net.parameters();
    velocity_.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) velocity_[i].assign(params[i].tensor->size(), 0.0f);

    std::vector<epoch_record> history;
    const std::size_t bs = std::min(config_.batch_size, train.size());
    for (std::size_t epoch = 1; epoch <= config_.epochs; ++epoch) {
      const auto order = data::shuffled_order(train.size(), config_.seed + epoch);
      loss_breakdown sum;
      std::size_t batches = 0;
      for (std::size_t start = 0; start < order.size(); start += bs) {
        const std::size_t end = std::min(order.size(), start + bs);
        if (end - start < 2) continue;
        const std::span<const std::size_t> idx(order.data() + start, end - start);
        const auto step = train_step(net, data::make_image_batch(train, idx), data::make_label_batch(train, idx));
        if (!std::isfinite(step.total)) {
          std::ostringstream msg;
          msg << "training diverged at epoch " << epoch << ", batch " << batches << ": bce=" << step.bce
              << " mask_l1=" << step.mask_l1 << " (try a smaller learning rate)";
          throw divergence_error(msg.str());
        }
        sum.bce += step.bce;
        sum.mask_l1 += step.mask_l1;
        ++batches;
      }
      epoch_record rec;
      rec.epoch = epoch;
      rec.loss.bce = sum.bce / static_cast<double>(batches);
      rec.loss.mask_l1 = sum.mask_l1 / static_cast<double>(batches);
      rec.loss.total = rec.loss.bce + config_.lambda * rec.loss.mask_l1;
      rec.mean_accuracy = evaluate_accuracy(net, eval.empty() ? train : eval).mean;
      net.metadata.epochs += 1;
      history.push_back(rec);
      if (on_epoch) on_epoch(rec);
    }
    net.metadata.lambda = config_.lambda;
    net.metadata.seed = config_.seed;
    return history;
  }

  /// One forward/backward/update on a batch; returns the batch loss terms.
  loss_breakdown train_step(attrnet& net, const tensor& images, const tensor& labels) {
    tape_.reset();
    const auto vars = bind_network(tape_, net, true);
    std::array<kernels::batch_norm_state<float>*, 4> stats{};
    for (std::size_t i = 0; i < 4; ++i) stats[i] = &net.blocks[i].stats;
    const auto out = run_network(tape_, net, vars, tape_.constant(images), kernels::norm_mode::train, stats);
    const var bce = tape_.binary_cross_entropy(out.probabilities, labels);
    const var l1 = detail::mask_l1_node(tape_, out, images.dim(0));
    const var total =
        config_.lambda > 0.0 ? tape_.add(bce, tape_.scale(l1, static_cast<float>(config_.lambda))) : bce;

    loss_breakdown loss;
    loss.bce = tape_.value(bce)[0];
    loss.mask_l1 = tape_.value(l1)[0];
    loss.total = loss.bce + config_.lambda * loss.mask_l1;
    if (!std::isfinite(loss.total)) return loss;

    tape_.backward(total);
    auto params = net.parameters();
    if (velocity_.size() != params.size()) {
      velocity_.assign(params.size(), {});
      for (std::size_t i = 0; i < params.size(); ++i) velocity_[i].assign(params[i].tensor->size(), 0.0f);
    }
    const auto ordered = vars.ordered();
    const float lr = static_cast<float>(config_.learning_rate);
    const float mu = static_cast<float>(config_.momentum);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const tensor g = tape_.grad(ordered[i]);
      auto w = params[i].tensor->data();
      auto& v = velocity_[i];
      if (config_.optimizer == optimizer_kind::momentum) {
        for (std::size_t j = 0; j < w.size(); ++j) {
          v[j] = mu * v[j] + g[j];
          w[j] -= lr * v[j];
        }
      } else {
        for (std::size_t j = 0; j < w.size(); ++j) w[j] -= lr * g[j];
      }
    }
    return loss;
  }

 private:
  train_config config_;
  tape tape_;
  std::vector<std::vector<float>> velocity_;
};

inline std::vector<epoch_record> train(attrnet& net, std::span<const data::sample_record> train_set,
                                       const train_config& config,
                                       std::span<const data::sample_record> eval_set = {},
                                       const trainer::epoch_callback& on_epoch = {}) {
  trainer t(config);
  return t.fit(net, train_set, eval_set, on_epoch);
}

inline std::string training_log_csv(const std::vector<epoch_record>& history) {
  std::ostringstream out;
  out.precision(9);
  out << "epoch,loss_total,loss_bce,mask_l1,mean_acc\n";
  for (const auto& r : history) {
    out << r.epoch << ',' << r.loss.total << ',' << r.loss.bce << ',' << r.loss.mask_l1 << ',' << r.mean_accuracy
        << '\n';
  }
  return out.str();
}

}  // namespace prednet
