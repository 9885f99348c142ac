// Copyright (c) 2026, prednet authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "httplib.h"
#include "json.hpp"

#include <charconv>
#include <cmath>
#include <cstdlib>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "prednet/analysis.hpp"
#include "prednet/attrnet.hpp"
#include "prednet/dataset.hpp"
#include "prednet/errors.hpp"
#include "prednet/perturbation.hpp"
#include "prednet/trainer.hpp"

/**
 * HTTP facade for an interactive perturbation session.
 *
 * The session keeps an untouched baseline and a current snapshot. Snapshots
 * are immutable; every mutation builds the next one and swaps a shared
 * pointer under a mutex, so a request that grabbed a snapshot computes
 * entirely against that one version.
 */
namespace prednet::service {

using json = nlohmann::json;

/// Raised when a client's expected_version no longer matches the session.
class conflict_error : public std::runtime_error {
 public:
  conflict_error(std::uint64_t expected, std::uint64_t actual)
      : std::runtime_error("version conflict: expected " + std::to_string(expected) + ", session is at " +
                           std::to_string(actual)),
        actual_(actual) {}
  std::uint64_t actual() const noexcept { return actual_; }

 private:
  std::uint64_t actual_;
};

class not_found_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct snapshot {
  std::uint64_t version = 0;
  attrnet model;  // gate reflects pruning
  mask_transform_params transform;
  std::vector<std::vector<float>> undo_gates;  // gates before each prune still undoable

  std::optional<mask_transform_params> active_transform() const {
    if (transform.is_identity() && transform.clamp) return std::nullopt;
    return transform;
  }

  std::vector<std::size_t> pruned_channels() const {
    std::vector<std::size_t> out;
    for (std::size_t c = 0; c < model.channel_gate.size(); ++c)
      if (model.channel_gate[c] == 0.0f) out.push_back(c);
    return out;
  }

  /// Mask statistics depend only on the gate; computed once per snapshot on first use.
  const mask_stats& stats(std::span<const data::sample_record> records, std::size_t limit) const {
    std::call_once(stats_once_, [&] { stats_ = mean_mask_matrix(model, records, limit); });
    return stats_;
  }

 private:
  mutable std::once_flag stats_once_;
  mutable mask_stats stats_;
};

struct session_options {
  std::size_t analysis_samples = 128;  // records used for mask statistics
  std::size_t accuracy_samples = 500;  // held-out records used by /api/accuracy
  std::uint64_t noise_seed = 1;
};

class session {
 public:
  session(attrnet baseline, data::dataset dataset, session_options options = {})
      : dataset_(std::move(dataset)), options_(options) {
    if (dataset_.size() == 0) throw argument_error("session needs a non-empty dataset");
    if (dataset_.manifest().attribute_count() != baseline.attribute_count()) {
      throw dimension_error("dataset and model disagree on the attribute count");
    }
    auto first = std::make_shared<snapshot>();
    first->model = std::move(baseline);
    baseline_ = first;
    current_ = first;
  }

  std::shared_ptr<const snapshot> baseline() const { return baseline_; }

  std::shared_ptr<const snapshot> current() const {
    std::lock_guard lock(mutex_);
    return current_;
  }

  const data::dataset& dataset() const noexcept { return dataset_; }
  const session_options& options() const noexcept { return options_; }

  std::shared_ptr<const snapshot> prune(const std::vector<std::size_t>& channels,
                                        std::optional<std::uint64_t> expected_version) {
    if (channels.empty()) throw argument_error("prune needs at least one channel");
    prune_plan plan;
    for (auto c : channels) plan.entries.push_back({c, prune_reason::random_draw});
    return mutate(expected_version, [&](const snapshot& cur, snapshot& next) {
      next.model = apply_pruning(cur.model, plan);
      next.transform = cur.transform;
      next.undo_gates = cur.undo_gates;
      next.undo_gates.push_back(cur.model.channel_gate);
    });
  }

  std::shared_ptr<const snapshot> undo(std::optional<std::uint64_t> expected_version) {
    return mutate(expected_version, [&](const snapshot& cur, snapshot& next) {
      if (cur.undo_gates.empty()) throw argument_error("nothing to undo");
      next.model = cur.model;
      next.model.channel_gate = cur.undo_gates.back();
      next.transform = cur.transform;
      next.undo_gates.assign(cur.undo_gates.begin(), cur.undo_gates.end() - 1);
    });
  }

  std::shared_ptr<const snapshot> set_transform(const mask_transform_params& params,
                                                std::optional<std::uint64_t> expected_version) {
    validate(params);
    return mutate(expected_version, [&](const snapshot& cur, snapshot& next) {
      next.model = cur.model;
      next.transform = params;
      next.undo_gates = cur.undo_gates;
    });
  }

  std::shared_ptr<const snapshot> reset(std::optional<std::uint64_t> expected_version) {
    return mutate(expected_version, [&](const snapshot&, snapshot& next) { next.model = baseline_->model; });
  }

  /// Records for a list of ids; unknown ids are a not-found error.
  std::vector<data::sample_record> samples(const std::vector<std::uint64_t>& ids) const {
    std::vector<data::sample_record> out;
    for (auto id : ids) {
      if (id >= dataset_.size()) throw not_found_error("no sample with id " + std::to_string(id));
      out.push_back(dataset_[id]);
    }
    return out;
  }

  std::span<const data::sample_record> analysis_records() const {
    auto train = dataset_.train();
    auto pool = train.empty() ? std::span<const data::sample_record>(dataset_.records()) : train;
    return pool.first(std::min(pool.size(), options_.analysis_samples));
  }

  std::span<const data::sample_record> accuracy_records() const {
    auto test = dataset_.test();
    auto pool = test.empty() ? std::span<const data::sample_record>(dataset_.records()) : test;
    return pool.first(std::min(pool.size(), options_.accuracy_samples));
  }

 private:
  template <typename F>
  std::shared_ptr<const snapshot> mutate(std::optional<std::uint64_t> expected, F&& build) {
    std::lock_guard writer(write_mutex_);
    auto cur = current();
    if (expected && *expected != cur->version) throw conflict_error(*expected, cur->version);
    auto next = std::make_shared<snapshot>();
    build(*cur, *next);
    next->version = cur->version + 1;
    std::lock_guard lock(mutex_);
    current_ = next;
    return next;
  }

  data::dataset dataset_;
  session_options options_;
  std::shared_ptr<const snapshot> baseline_;
  std::shared_ptr<const snapshot> current_;
  mutable std::mutex mutex_;  // guards current_
  std::mutex write_mutex_;    // serializes mutations
};

// ---- JSON helpers ------------------------------------------------------------

inline json transform_json(const mask_transform_params& p) { return {{"n", p.n}, {"beta", p.beta}, {"clamp", p.clamp}}; }

inline json tensor_json(const tensor& t) {
  return {{"shape", t.shape()}, {"data", std::vector<float>(t.data().begin(), t.data().end())}};
}

inline json accuracy_json(const accuracy_report& r) { return {{"mean", r.mean}, {"per_attribute", r.per_attribute}}; }

inline json correlation_json(const correlation_matrix& m) {
  json data = json::array();
  for (std::size_t i = 0; i < m.values.size(); ++i) {
    data.push_back(m.defined_flags[i] ? json(m.values[i]) : json(nullptr));
  }
  return {{"axis", to_string(m.axis)}, {"size", m.size}, {"labels", m.labels}, {"data", std::move(data)}};
}

inline json summary_json(const session& s) {
  const auto snap = s.current();
  const auto& m = snap->model;
  const auto& manifest = s.dataset().manifest();
  return {{"version", snap->version},
          {"attributes", m.attribute_count()},
          {"channels", feature_channels},
          {"attribute_names", m.attribute_names},
          {"image", {{"height", manifest.height}, {"width", manifest.width}, {"channels", 3}}},
          {"pruned_channels", snap->pruned_channels()},
          {"undo_depth", snap->undo_gates.size()},
          {"transform", transform_json(snap->transform)},
          {"metadata", {{"lambda", m.metadata.lambda}, {"seed", m.metadata.seed}, {"epochs", m.metadata.epochs}}},
          {"dataset", {{"count", manifest.count}, {"train", manifest.train.size()}, {"test", manifest.test.size()}}}};
}

namespace detail {

inline json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return json::object();
  try {
    auto j = json::parse(req.body);
    if (!j.is_object()) throw argument_error("request body must be a JSON object");
    return j;
  } catch (const json::parse_error& e) {
    throw argument_error(std::string("malformed JSON: ") + e.what());
  }
}

inline std::optional<std::uint64_t> expected_version(const json& body) {
  if (!body.contains("expected_version")) return std::nullopt;
  const auto& v = body["expected_version"];
  if (!v.is_number_unsigned()) throw argument_error("expected_version must be a non-negative integer");
  return v.get<std::uint64_t>();
}

template <typename T>
T field(const json& body, const char* name) {
  if (!body.contains(name)) throw argument_error(std::string("missing field '") + name + "'");
  try {
    return body.at(name).get<T>();
  } catch (const json::exception&) {
    throw argument_error(std::string("field '") + name + "' has the wrong type");
  }
}

template <typename T>
T field_or(const json& body, const char* name, T fallback) {
  return body.contains(name) ? field<T>(body, name) : fallback;
}

inline std::uint64_t query_uint(const httplib::Request& req, const char* name, std::optional<std::uint64_t> fallback = {}) {
  if (!req.has_param(name)) {
    if (fallback) return *fallback;
    throw argument_error(std::string("missing query parameter '") + name + "'");
  }
  const std::string v = req.get_param_value(name);
  std::uint64_t out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc{} || r.ptr != v.data() + v.size()) {
    throw argument_error(std::string("query parameter '") + name + "' must be a non-negative integer");
  }
  return out;
}

inline double query_double(const httplib::Request& req, const char* name, double fallback) {
  if (!req.has_param(name)) return fallback;
  const std::string v = req.get_param_value(name);
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  if (v.empty() || *end != '\0' || !std::isfinite(out)) {
    throw argument_error(std::string("query parameter '") + name + "' must be a number");
  }
  return out;
}

inline void send_json(httplib::Response& res, const json& body, int status = 200) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

inline void send_error(httplib::Response& res, int status, const std::string& kind, const std::string& message,
                       json extra = json::object()) {
  extra["error"] = message;
  extra["kind"] = kind;
  send_json(res, extra, status);
}

/// Wraps a handler so library exceptions map to HTTP statuses.
template <typename F>
httplib::Server::Handler guarded(F&& f) {
  return [f = std::forward<F>(f)](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const conflict_error& e) {
      send_error(res, 409, "conflict", e.what(), {{"version", e.actual()}});
    } catch (const not_found_error& e) {
      send_error(res, 404, "not_found", e.what());
    } catch (const argument_error& e) {
      send_error(res, 400, "validation", e.what());
    } catch (const dimension_error& e) {
      send_error(res, 400, "validation", e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, "internal", e.what());
    }
  };
}

inline tensor image_from_json(const json& image, std::size_t height, std::size_t width) {
  const auto h = field<std::size_t>(image, "height");
  const auto w = field<std::size_t>(image, "width");
  const auto values = field<std::vector<double>>(image, "data");
  if (h != height || w != width) {
    throw argument_error("uploaded image must be " + std::to_string(height) + " x " + std::to_string(width));
  }
  if (values.size() != h * w * 3) throw argument_error("uploaded image data must hold height * width * 3 values");
  tensor img({h, w, 3});
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!(values[i] >= 0.0 && values[i] <= 1.0)) throw argument_error("pixel values must lie in [0, 1]");
    img[i] = static_cast<float>(values[i]);
  }
  return img;
}

}  // namespace detail

/// Registers every route on `server`. The session must outlive the server.
inline void register_routes(httplib::Server& server, session& s) {
  using detail::guarded;
  using detail::send_json;

  server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                              {"Access-Control-Allow-Headers", "Content-Type"},
                              {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
  server.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

  server.Get("/api/model/summary", guarded([&s](const httplib::Request&, httplib::Response& res) {
               send_json(res, summary_json(s));
             }));

  server.Get("/api/attributes", guarded([&s](const httplib::Request&, httplib::Response& res) {
               const auto snap = s.current();
               const auto& manifest = s.dataset().manifest();
               json attrs = json::array();
               for (std::size_t k = 0; k < snap->model.attribute_names.size(); ++k) {
                 const auto& name = snap->model.attribute_names[k];
                 json group = nullptr;
                 for (const auto& [g, members] : manifest.correlation_groups)
                   if (std::find(members.begin(), members.end(), name) != members.end()) group = g;
                 attrs.push_back({{"index", k}, {"name", name}, {"correlation_group", group}});
               }
               send_json(res, {{"version", snap->version}, {"attributes", attrs}});
             }));

  server.Get(R"(/api/masks/(\d+))", guarded([&s](const httplib::Request& req, httplib::Response& res) {
               const auto snap = s.current();
               const std::size_t k = std::stoul(req.matches[1]);
               if (k >= snap->model.attribute_count()) throw not_found_error("no attribute " + std::to_string(k));
               const auto id = detail::query_uint(req, "sample");
               const auto records = s.samples({id});
               const auto features = forward_features(snap->model, data::image_to_batch(records[0].image));
               auto mask = compute_mask(snap->model, features, k);
               if (auto t = snap->active_transform()) mask = g_transform(mask, t->n, t->beta, t->clamp);
               const std::size_t plane = mask.dim(2) * mask.dim(3);
               for (std::size_t c = 0; c < feature_channels; ++c)
                 if (snap->model.channel_gate[c] == 0.0f)
                   std::fill_n(mask.raw() + c * plane, plane, 0.0f);
               send_json(res, {{"version", snap->version},
                               {"attribute", k},
                               {"sample", id},
                               {"shape", {feature_channels, mask.dim(2), mask.dim(3)}},
                               {"data", std::vector<float>(mask.data().begin(), mask.data().end())},
                               {"pruned_channels", snap->pruned_channels()},
                               {"transform", transform_json(snap->transform)}});
             }));

  server.Get("/api/maskstats", guarded([&s](const httplib::Request&, httplib::Response& res) {
               const auto snap = s.current();
               const auto& st = snap->stats(s.analysis_records(), s.options().analysis_samples);
               send_json(res, {{"version", snap->version},
                               {"samples", st.samples},
                               {"shape", {st.attributes, st.channels}},
                               {"attribute_names", snap->model.attribute_names},
                               {"data", st.values}});
             }));

  server.Get("/api/correlations", guarded([&s](const httplib::Request& req, httplib::Response& res) {
               const std::string axis = req.has_param("axis") ? req.get_param_value("axis") : "channel";
               if (axis != "channel" && axis != "attribute") {
                 throw argument_error("axis must be 'channel' or 'attribute'");
               }
               const auto snap = s.current();
               const auto& st = snap->stats(s.analysis_records(), s.options().analysis_samples);
               const auto m = axis == "channel" ? channel_correlation(st)
                                                : attribute_correlation(st, snap->model.attribute_names);
               json body = correlation_json(m);
               body["version"] = snap->version;
               send_json(res, body);
             }));

  server.Get("/api/sensitivity", guarded([&s](const httplib::Request& req, httplib::Response& res) {
               const auto snap = s.current();
               const auto id = detail::query_uint(req, "sample");
               const auto k = detail::query_uint(req, "k");
               if (k >= snap->model.attribute_count()) throw not_found_error("no attribute " + std::to_string(k));
               const auto records = s.samples({id});
               const auto map = sensitivity(snap->model, data::image_to_batch(records[0].image), k);
               json body = tensor_json(map);
               body["version"] = snap->version;
               body["sample"] = id;
               body["attribute"] = k;
               send_json(res, body);
             }));

  server.Post("/api/prune/plan", guarded([&s](const httplib::Request& req, httplib::Response& res) {
                const auto body = detail::parse_body(req);
                const auto snap = s.current();
                const auto budget = detail::field<std::size_t>(body, "budget");
                const auto strategy = detail::field_or<std::string>(body, "strategy", "semantic");
                prune_plan plan;
                if (strategy == "semantic") {
                  const double threshold = detail::field_or<double>(body, "threshold", 0.9);
                  const auto& st = snap->stats(s.analysis_records(), s.options().analysis_samples);
                  plan = plan_semantic_pruning(channel_correlation(st), channel_weight_norms(snap->model), budget,
                                               threshold);
                } else if (strategy == "random") {
                  plan = plan_random_pruning(budget, detail::field_or<std::uint64_t>(body, "seed", 1));
                } else {
                  throw argument_error("strategy must be 'semantic' or 'random'");
                }
                json out = to_json(plan);
                out["version"] = snap->version;
                send_json(res, out);
              }));

  server.Post("/api/prune", guarded([&s](const httplib::Request& req, httplib::Response& res) {
                const auto body = detail::parse_body(req);
                const auto channels = detail::field<std::vector<std::size_t>>(body, "channels");
                const auto snap = s.prune(channels, detail::expected_version(body));
                send_json(res, {{"version", snap->version}, {"pruned_channels", snap->pruned_channels()}});
              }));

  server.Post("/api/prune/undo", guarded([&s](const httplib::Request& req, httplib::Response& res) {
                const auto body = detail::parse_body(req);
                const auto snap = s.undo(detail::expected_version(body));
                send_json(res, {{"version", snap->version}, {"pruned_channels", snap->pruned_channels()}});
              }));

  server.Post("/api/transform", guarded([&s](const httplib::Request& req, httplib::Response& res) {
                const auto body = detail::parse_body(req);
                mask_transform_params p;
                p.n = detail::field<double>(body, "n");
                p.beta = detail::field<double>(body, "beta");
                p.clamp = detail::field_or<bool>(body, "clamp", true);
                const auto snap = s.set_transform(p, detail::expected_version(body));
                send_json(res, {{"version", snap->version}, {"transform", transform_json(snap->transform)}});
              }));

  server.Get("/api/transform/curve", guarded([&s](const httplib::Request& req, httplib::Response& res) {
               const auto snap = s.current();
               mask_transform_params p = snap->transform;
               p.n = detail::query_double(req, "n", p.n);
               p.beta = detail::query_double(req, "beta", p.beta);
               validate(p);
               const auto points = detail::query_uint(req, "points", 101);
               if (points < 2 || points > 10001) throw argument_error("points must lie in [2, 10001]");
               tensor m({points});
               for (std::size_t i = 0; i < points; ++i) m[i] = static_cast<float>(static_cast<double>(i) / (points - 1));
               const auto g = g_transform(m, p.n, p.beta, p.clamp);
               send_json(res, {{"version", snap->version},
                               {"transform", transform_json(p)},
                               {"m", std::vector<float>(m.data().begin(), m.data().end())},
                               {"g", std::vector<float>(g.data().begin(), g.data().end())}});
             }));

  server.Post("/api/infer", guarded([&s](const httplib::Request& req, httplib::Response& res) {
                const auto body = detail::parse_body(req);
                const auto snap = s.current();
                const auto base = s.baseline();
                std::vector<tensor> images;
                json ids = json::array();
                std::vector<std::vector<std::uint8_t>> labels;
                if (body.contains("samples")) {
                  const auto wanted = detail::field<std::vector<std::uint64_t>>(body, "samples");
                  if (wanted.empty()) throw argument_error("samples must not be empty");
                  if (wanted.size() > 256) throw argument_error("at most 256 samples per request");
                  for (auto& r : s.samples(wanted)) {
                    images.push_back(r.image);
                    labels.push_back(r.labels);
                    ids.push_back(r.id);
                  }
                } else if (body.contains("image")) {
                  const auto& m = s.dataset().manifest();
                  images.push_back(detail::image_from_json(body["image"], m.height, m.width));
                  ids.push_back(nullptr);
                } else {
                  throw argument_error("infer needs 'samples' or 'image'");
                }
                std::vector<std::size_t> idx(images.size());
                std::iota(idx.begin(), idx.end(), std::size_t{0});
                const auto batch = data::stack_images(images, idx);
                const auto p_base = forward_all(base->model, batch);
                const auto p_cur = forward_all(snap->model, batch, snap->active_transform());
                const std::size_t k = snap->model.attribute_count();
                json results = json::array();
                for (std::size_t i = 0; i < images.size(); ++i) {
                  json r{{"sample", ids[i]},
                         {"baseline", std::vector<float>(p_base.data().begin() + i * k, p_base.data().begin() + (i + 1) * k)},
                         {"current", std::vector<float>(p_cur.data().begin() + i * k, p_cur.data().begin() + (i + 1) * k)}};
                  if (i < labels.size()) r["labels"] = labels[i];
                  results.push_back(std::move(r));
                }
                send_json(res, {{"version", snap->version},
                                {"attribute_names", snap->model.attribute_names},
                                {"transform", transform_json(snap->transform)},
                                {"results", std::move(results)}});
              }));

  server.Get("/api/accuracy", guarded([&s](const httplib::Request& req, httplib::Response& res) {
               const auto snap = s.current();
               const double sigma = detail::query_double(req, "noise_sigma", 0.0);
               if (sigma < 0.0) throw argument_error("noise_sigma must be >= 0");
               const auto seed = detail::query_uint(req, "seed", s.options().noise_seed);
               const auto records = s.accuracy_records();
               std::vector<tensor> noisy;
               for (const auto& r : records) noisy.push_back(data::add_gaussian_noise(r.image, sigma, noise_seed(seed, sigma, r.id)));
               const tensor labels = labels_of(records);
               const auto base = predict_variants(s.baseline()->model, records, {head_variant{}}, &noisy);
               const auto cur = predict_variants(snap->model, records, {head_variant{{}, snap->active_transform()}}, &noisy);
               send_json(res, {{"version", snap->version},
                               {"noise_sigma", sigma},
                               {"seed", seed},
                               {"samples", records.size()},
                               {"baseline", accuracy_json(accuracy_from_predictions(base[0], labels))},
                               {"current", accuracy_json(accuracy_from_predictions(cur[0], labels))}});
             }));

  server.Post("/api/reset", guarded([&s](const httplib::Request& req, httplib::Response& res) {
                const auto body = detail::parse_body(req);
                const auto snap = s.reset(detail::expected_version(body));
                send_json(res, summary_json(s));
                (void)snap;
              }));

  server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.status == 404 && res.body.empty()) detail::send_error(res, 404, "not_found", "no such route");
  });
}

struct bind_address {
  std::string host = "127.0.0.1";
  int port = 8080;
};

/// Parses "host:port", ":port" or "port".
inline bind_address parse_bind(const std::string& text) {
  bind_address b;
  const auto colon = text.rfind(':');
  const std::string port = colon == std::string::npos ? text : text.substr(colon + 1);
  if (colon != std::string::npos && colon > 0) b.host = text.substr(0, colon);
  int value = 0;
  const auto r = std::from_chars(port.data(), port.data() + port.size(), value);
  if (port.empty() || r.ec != std::errc{} || r.ptr != port.data() + port.size() || value < 0 || value > 65535) {
    throw argument_error("bind address must look like host:port, got '" + text + "'");
  }
  b.port = value;
  return b;
}

/// --bind wins, then PREDNET_BIND, then 127.0.0.1:8080.
inline bind_address resolve_bind(const std::optional<std::string>& flag) {
  if (flag && !flag->empty()) return parse_bind(*flag);
  if (const char* env = std::getenv("PREDNET_BIND"); env && *env) return parse_bind(env);
  return {};
}

}  // namespace prednet::service
