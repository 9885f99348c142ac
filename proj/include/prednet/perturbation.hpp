// Copyright (c) 2026, prednet authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "prednet/analysis.hpp"
#include "prednet/attrnet.hpp"
#include "prednet/dataset.hpp"
#include "prednet/errors.hpp"
#include "prednet/tape.hpp"
#include "prednet/trainer.hpp"

namespace prednet {

// ---- weight norms ----------------------------------------------------------

/// Sum over attributes of |w_k[c]|, the classifier weight that reads channel c.
inline double channel_weight_norm(const attrnet& net, std::size_t c) {
  if (c >= feature_channels) throw argument_error("channel index " + std::to_string(c) + " out of range");
  double acc = 0.0;
  for (const auto& h : net.heads) acc += std::abs(static_cast<double>(h.classifier_weight[c]));
  return acc;
}

inline std::vector<double> channel_weight_norms(const attrnet& net) {
  std::vector<double> out(feature_channels);
  for (std::size_t c = 0; c < feature_channels; ++c) out[c] = channel_weight_norm(net, c);
  return out;
}

// ---- prune plans -----------------------------------------------------------

enum class prune_strategy { semantic, random };

inline std::string to_string(prune_strategy s) { return s == prune_strategy::semantic ? "semantic" : "random"; }

/// Why a channel entered a plan.
enum class prune_reason { correlated_pair, below_threshold_pair, lowest_norm, random_draw };

inline std::string to_string(prune_reason r) {
  switch (r) {
    case prune_reason::correlated_pair: return "correlated_pair";
    case prune_reason::below_threshold_pair: return "below_threshold_pair";
    case prune_reason::lowest_norm: return "lowest_norm";
    case prune_reason::random_draw: return "random_draw";
  }
  return "unknown";
}

struct prune_entry {
  std::size_t channel = 0;
  prune_reason reason = prune_reason::random_draw;
  // The pair that triggered the entry (pair reasons only).
  std::size_t pair_a = 0, pair_b = 0;
  double correlation = 0.0;
  double norm_a = 0.0, norm_b = 0.0;
};

struct prune_plan {
  prune_strategy strategy = prune_strategy::semantic;
  double threshold = 0.9;
  std::uint64_t seed = 0;
  std::vector<prune_entry> entries;

  std::vector<std::size_t> channels() const {
    std::vector<std::size_t> out;
    for (const auto& e : entries) out.push_back(e.channel);
    return out;
  }
};

inline nlohmann::json to_json(const prune_plan& plan) {
  nlohmann::json j;
  j["strategy"] = to_string(plan.strategy);
  if (plan.strategy == prune_strategy::semantic) j["threshold"] = plan.threshold;
  else j["seed"] = plan.seed;
  j["channels"] = plan.channels();
  auto& entries = j["entries"] = nlohmann::json::array();
  for (const auto& e : plan.entries) {
    nlohmann::json je{{"channel", e.channel}, {"reason", to_string(e.reason)}};
    if (e.reason == prune_reason::correlated_pair || e.reason == prune_reason::below_threshold_pair) {
      je["pair"] = {e.pair_a, e.pair_b};
      je["correlation"] = e.correlation;
      je["norms"] = {e.norm_a, e.norm_b};
    } else if (e.reason == prune_reason::lowest_norm) {
      je["norm"] = e.norm_a;
    }
    entries.push_back(std::move(je));
  }
  return j;
}

namespace detail {

inline void check_budget(std::size_t budget) {
  if (budget == 0 || budget >= feature_channels) {
    throw argument_error("prune budget must satisfy 0 < budget < " + std::to_string(feature_channels) + ", got " +
                         std::to_string(budget));
  }
}

}  // namespace detail

/**
 * Scans channel pairs from most to least correlated and prunes the member
 * whose classifier weights have the lower L1 norm (ties: the higher index).
 * Pairs at or above `threshold` go first; if they run out before the budget
 * is met the scan continues through the remaining defined pairs, and finally
 * through the untouched channels in ascending norm order.
 */
inline prune_plan plan_semantic_pruning(const correlation_matrix& corr, std::span<const double> norms,
                                        std::size_t budget, double threshold = 0.9) {
  detail::check_budget(budget);
  if (!(threshold > -1.0 && threshold <= 1.0)) throw argument_error("threshold must lie in (-1, 1]");
  const std::size_t c = corr.size;
  if (norms.size() != c) throw dimension_error("need one weight norm per channel");
  if (budget >= c) throw argument_error("budget must be smaller than the channel count");

  struct pair {
    std::size_t a, b;
    double r;
  };
  std::vector<pair> pairs;
  for (std::size_t a = 0; a < c; ++a)
    for (std::size_t b = a + 1; b < c; ++b)
      if (corr.defined(a, b)) pairs.push_back({a, b, corr.at(a, b)});
  // Enumeration order is already (a, b) ascending, so a stable sort keeps index ties ordered.
  std::stable_sort(pairs.begin(), pairs.end(), [](const pair& x, const pair& y) { return x.r > y.r; });

  prune_plan plan;
  plan.strategy = prune_strategy::semantic;
  plan.threshold = threshold;
  std::vector<bool> marked(c, false);
  for (const auto& p : pairs) {
    if (plan.entries.size() == budget) break;
    const std::size_t victim = norms[p.a] < norms[p.b] ? p.a : p.b;
    if (marked[victim]) continue;
    marked[victim] = true;
    plan.entries.push_back({victim,
                            p.r >= threshold ? prune_reason::correlated_pair : prune_reason::below_threshold_pair,
                            p.a, p.b, p.r, norms[p.a], norms[p.b]});
  }
  if (plan.entries.size() < budget) {
    std::vector<std::size_t> rest;
    for (std::size_t i = 0; i < c; ++i)
      if (!marked[i]) rest.push_back(i);
    std::stable_sort(rest.begin(), rest.end(), [&](std::size_t x, std::size_t y) { return norms[x] < norms[y]; });
    for (std::size_t i = 0; i < rest.size() && plan.entries.size() < budget; ++i) {
      prune_entry e;
      e.channel = rest[i];
      e.reason = prune_reason::lowest_norm;
      e.norm_a = norms[rest[i]];
      plan.entries.push_back(e);
    }
  }
  return plan;
}

/// Uniform sample of `budget` distinct channels without replacement.
inline prune_plan plan_random_pruning(std::size_t budget, std::uint64_t seed) {
  detail::check_budget(budget);
  const auto order = data::shuffled_order(feature_channels, seed);
  prune_plan plan;
  plan.strategy = prune_strategy::random;
  plan.seed = seed;
  for (std::size_t i = 0; i < budget; ++i) {
    prune_entry e;
    e.channel = order[i];
    e.reason = prune_reason::random_draw;
    plan.entries.push_back(e);
  }
  return plan;
}

inline void validate_plan(const prune_plan& plan) {
  std::set<std::size_t> seen;
  for (const auto& e : plan.entries) {
    if (e.channel >= feature_channels) throw argument_error("plan names channel " + std::to_string(e.channel));
    if (!seen.insert(e.channel).second) throw argument_error("plan repeats channel " + std::to_string(e.channel));
  }
}

/// Copy of `net` with the planned channels gated off. Channels already pruned stay pruned.
inline attrnet apply_pruning(const attrnet& net, const prune_plan& plan) {
  validate_plan(plan);
  attrnet out = net;
  for (const auto& e : plan.entries) out.channel_gate[e.channel] = 0.0f;
  if (std::count(out.channel_gate.begin(), out.channel_gate.end(), 0.0f) ==
      static_cast<std::ptrdiff_t>(feature_channels)) {
    throw argument_error("refusing to prune every feature channel");
  }
  return out;
}

// ---- mask transforms -------------------------------------------------------

inline void validate(const mask_transform_params& p) {
  if (!(p.n >= 1.0) || !std::isfinite(p.n)) throw argument_error("transform exponent n must be >= 1");
  if (!(p.beta >= 0.0) || !std::isfinite(p.beta)) throw argument_error("transform bias beta must be >= 0");
}

template <typename T>
basic_tensor<T> h_transform(const basic_tensor<T>& m, double n) {
  validate(mask_transform_params{n, 0.0});
  basic_tensor<T> out = m;
  for (auto& v : out.data()) v = detail::tone_curve(v, n);
  return out;
}

template <typename T>
basic_tensor<T> g_transform(const basic_tensor<T>& m, double n, double beta, bool clamp = true) {
  const mask_transform_params p{n, beta, clamp};
  validate(p);
  basic_tape<T> tape(false);
  return tape.value(tape.mask_transform(tape.constant(m), p));
}

/// forward_all with every mask passed through g(.; n, beta) first.
inline tensor classify_transformed(const attrnet& net, const tensor& images, const mask_transform_params& params) {
  validate(params);
  return forward_all(net, images, std::optional<mask_transform_params>(params));
}

// ---- shared-extractor evaluation ---------------------------------------------

/// One way of running the heads on top of a shared feature map.
struct head_variant {
  std::vector<float> gate;  // empty: the network's own gate
  std::optional<mask_transform_params> transform;
};

/**
 * Predictions (N x K per variant) for several gate/transform variants while
 * running the extractor once per chunk. Results are bit-identical to calling
 * forward_all on the correspondingly pruned network.
 */
inline std::vector<tensor> predict_variants(const attrnet& net, std::span<const data::sample_record> records,
                                            const std::vector<head_variant>& variants,
                                            const std::vector<tensor>* replacement_images = nullptr,
                                            std::size_t chunk = 64) {
  if (records.empty()) throw argument_error("no samples to evaluate");
  const std::size_t n = records.size(), k = net.attribute_count();
  attrnet open = net;
  std::fill(open.channel_gate.begin(), open.channel_gate.end(), 1.0f);

  // Variants sharing a gate share their masks; only the transform and classifier run per variant.
  std::vector<std::vector<std::size_t>> groups;
  std::vector<const std::vector<float>*> group_gate;
  for (std::size_t v = 0; v < variants.size(); ++v) {
    const auto* gate = variants[v].gate.empty() ? &net.channel_gate : &variants[v].gate;
    auto it = std::find_if(group_gate.begin(), group_gate.end(), [&](const auto* g) { return *g == *gate; });
    if (it == group_gate.end()) {
      group_gate.push_back(gate);
      groups.emplace_back();
      it = group_gate.end() - 1;
    }
    groups[static_cast<std::size_t>(it - group_gate.begin())].push_back(v);
  }

  std::vector<tensor> out(variants.size(), tensor({n, k}));
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < n; start += chunk) {
    idx.clear();
    for (std::size_t i = start; i < std::min(n, start + chunk); ++i) idx.push_back(i);
    const tensor images = replacement_images ? data::stack_images(*replacement_images, idx)
                                             : data::make_image_batch(records, idx);
    const tensor ungated = forward_features(open, images);
    for (std::size_t g = 0; g < groups.size(); ++g) {
      basic_tape<float> tape(false);
      const auto vars = bind_network(tape, net, false);
      const var features = tape.channel_gate(tape.constant(ungated), *group_gate[g]);
      std::vector<std::vector<var>> columns(groups[g].size());
      for (const auto& h : vars.heads) {
        const var mask = head_mask(tape, h, features);
        for (std::size_t i = 0; i < groups[g].size(); ++i) {
          const auto& transform = variants[groups[g][i]].transform;
          const var applied = transform ? tape.mask_transform(mask, *transform) : mask;
          columns[i].push_back(head_classify(tape, h, features, applied));
        }
      }
      for (std::size_t i = 0; i < groups[g].size(); ++i) {
        const auto& p = tape.value(tape.concat_columns(columns[i]));
        std::copy(p.data().begin(), p.data().end(),
                  out[groups[g][i]].data().begin() + static_cast<std::ptrdiff_t>(start * k));
      }
    }
  }
  return out;
}

// ---- experiment harnesses --------------------------------------------------

struct robustness_table {
  std::vector<double> sigmas;
  std::vector<mask_transform_params> grid;
  std::vector<std::vector<double>> mean_accuracy;  // [sigma][grid entry]
};

inline std::vector<mask_transform_params> default_transform_grid() {
  std::vector<mask_transform_params> grid;
  for (double n : {1.0, 2.0, 3.0})
    for (double beta : {0.0, 0.25, 0.5}) grid.push_back({n, beta, true});
  return grid;
}

inline std::vector<double> default_noise_levels() { return {0.0, 0.1, 0.2, 0.3, 0.4, 0.5}; }

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace detail

/// Noise seed for one sample at one noise level; identical for every transform so comparisons are paired.
inline std::uint64_t noise_seed(std::uint64_t seed, double sigma, std::uint64_t sample_id) {
  return detail::splitmix64(seed ^ detail::splitmix64(std::bit_cast<std::uint64_t>(sigma) ^
                                                      detail::splitmix64(sample_id)));
}

inline robustness_table robustness_sweep(const attrnet& net, std::span<const data::sample_record> records,
                                         const std::vector<double>& sigmas,
                                         const std::vector<mask_transform_params>& grid, std::uint64_t seed) {
  if (sigmas.empty() || grid.empty()) throw argument_error("robustness sweep needs noise levels and transforms");
  if (records.empty()) throw argument_error("robustness sweep needs samples");
  for (double s : sigmas)
    if (!(s >= 0.0)) throw argument_error("noise sigma must be >= 0");
  std::vector<head_variant> variants;
  for (const auto& p : grid) {
    validate(p);
    variants.push_back({{}, p});
  }
  const tensor labels = labels_of(records);
  robustness_table table{sigmas, grid, {}};
  for (double sigma : sigmas) {
    std::vector<tensor> noisy;
    noisy.reserve(records.size());
    for (const auto& r : records) noisy.push_back(data::add_gaussian_noise(r.image, sigma, noise_seed(seed, sigma, r.id)));
    const auto preds = predict_variants(net, records, variants, &noisy);
    std::vector<double> row;
    for (const auto& p : preds) row.push_back(accuracy_from_predictions(p, labels).mean);
    table.mean_accuracy.push_back(std::move(row));
  }
  return table;
}

inline std::string robustness_csv(const robustness_table& t) {
  std::ostringstream out;
  out.precision(9);
  out << "sigma,n,beta,mean_acc\n";
  for (std::size_t s = 0; s < t.sigmas.size(); ++s)
    for (std::size_t g = 0; g < t.grid.size(); ++g)
      out << t.sigmas[s] << ',' << t.grid[g].n << ',' << t.grid[g].beta << ',' << t.mean_accuracy[s][g] << '\n';
  return out.str();
}

struct pruning_curve_row {
  std::size_t budget = 0;
  prune_strategy strategy = prune_strategy::semantic;
  std::uint64_t seed = 0;
  double mean_accuracy = 0.0;
};

struct pruning_curve_options {
  std::vector<std::size_t> budgets{8, 16, 32, 48, 64};
  std::size_t random_seeds = 10;
  std::uint64_t seed = 1;
  double threshold = 0.9;
  std::size_t sample_limit = 512;
};

/// Accuracy after semantic and random pruning at each budget. Random seeds are seed, seed+1, ...
inline std::vector<pruning_curve_row> pruning_curve(const attrnet& net,
                                                    std::span<const data::sample_record> analysis_set,
                                                    std::span<const data::sample_record> eval_set,
                                                    const pruning_curve_options& opt) {
  const auto stats = mean_mask_matrix(net, analysis_set, opt.sample_limit);
  const auto corr = channel_correlation(stats);
  const auto norms = channel_weight_norms(net);

  if (opt.random_seeds == 0) throw argument_error("pruning curve needs at least one random seed");
  std::vector<head_variant> variants;
  std::vector<pruning_curve_row> rows;
  std::vector<std::size_t> variant_of_row;
  for (std::size_t budget : opt.budgets) {
    // The semantic plan is deterministic; it is evaluated once and reported next to every random seed.
    const std::size_t semantic = variants.size();
    variants.push_back({apply_pruning(net, plan_semantic_pruning(corr, norms, budget, opt.threshold)).channel_gate,
                        std::nullopt});
    for (std::size_t s = 0; s < opt.random_seeds; ++s) {
      rows.push_back({budget, prune_strategy::semantic, opt.seed + s, 0.0});
      variant_of_row.push_back(semantic);
    }
    for (std::size_t s = 0; s < opt.random_seeds; ++s) {
      rows.push_back({budget, prune_strategy::random, opt.seed + s, 0.0});
      variant_of_row.push_back(variants.size());
      variants.push_back({apply_pruning(net, plan_random_pruning(budget, opt.seed + s)).channel_gate, std::nullopt});
    }
  }
  const auto preds = predict_variants(net, eval_set, variants);
  const tensor labels = labels_of(eval_set);
  std::vector<double> acc(variants.size());
  for (std::size_t v = 0; v < variants.size(); ++v) acc[v] = accuracy_from_predictions(preds[v], labels).mean;
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i].mean_accuracy = acc[variant_of_row[i]];
  return rows;
}

/// Mean accuracy per (budget, strategy), averaged over seeds, in budget order.
struct pruning_curve_point {
  std::size_t budget = 0;
  double semantic = 0.0;
  double random = 0.0;
};

inline std::vector<pruning_curve_point> summarize_pruning_curve(const std::vector<pruning_curve_row>& rows) {
  std::vector<pruning_curve_point> out;
  std::vector<std::size_t> counts;
  for (const auto& r : rows) {
    auto it = std::find_if(out.begin(), out.end(), [&](const auto& p) { return p.budget == r.budget; });
    if (it == out.end()) {
      out.push_back({r.budget, 0.0, 0.0});
      counts.push_back(0);
      it = out.end() - 1;
    }
    const auto i = static_cast<std::size_t>(it - out.begin());
    if (r.strategy == prune_strategy::semantic) it->semantic += r.mean_accuracy;
    else {
      it->random += r.mean_accuracy;
      ++counts[i];
    }
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].semantic /= static_cast<double>(counts[i]);
    out[i].random /= static_cast<double>(counts[i]);
  }
  return out;
}

inline std::string pruning_curve_csv(const std::vector<pruning_curve_row>& rows) {
  std::ostringstream out;
  out.precision(9);
  out << "budget,strategy,seed,mean_acc\n";
  for (const auto& r : rows) {
    out << r.budget << ',' << to_string(r.strategy) << ',' << r.seed << ',' << r.mean_accuracy << '\n';
  }
  return out.str();
}

}  // namespace prednet
