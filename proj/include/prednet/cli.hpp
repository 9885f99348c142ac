// Copyright (c) 2026, prednet authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "CLI11.hpp"
#include "json.hpp"

#include <charconv>
#include <csignal>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <pthread.h>
#include <string>
#include <thread>
#include <vector>

#include "prednet/analysis.hpp"
#include "prednet/checkpoint.hpp"
#include "prednet/dataset.hpp"
#include "prednet/io.hpp"
#include "prednet/perturbation.hpp"
#include "prednet/regression.hpp"
#include "prednet/service.hpp"
#include "prednet/trainer.hpp"

namespace prednet::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

enum exit_code : int { success = 0, usage_error = 1, runtime_error = 2 };

namespace detail {

template <typename T>
std::vector<T> parse_list(const std::string& text, const char* what) {
  std::vector<T> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item.empty()) continue;
    T value{};
    const auto r = std::from_chars(item.data(), item.data() + item.size(), value);
    if (r.ec != std::errc{} || r.ptr != item.data() + item.size()) {
      throw argument_error(std::string("bad entry '") + item + "' in " + what);
    }
    out.push_back(value);
  }
  if (out.empty()) throw argument_error(std::string(what) + " must not be empty");
  return out;
}

inline std::string json_scalar_token(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_array()) {
    std::string out;
    for (const auto& e : v) out += (out.empty() ? "" : ",") + json_scalar_token(e);
    return out;
  }
  return v.dump();
}

/**
 * Splices a JSON config file into argv: {"lambda": 0.001} becomes
 * "--lambda 0.001", inserted directly after the subcommand name(s) so any
 * flag the user typed later wins. Booleans become bare flags when true.
 */
inline std::vector<std::string> expand_config(const std::vector<std::string>& args, const std::set<std::string>& nested) {
  std::vector<std::string> rest;
  std::optional<std::string> config_path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw CLI::ArgumentMismatch("--config", 1, 0);
      config_path = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      config_path = args[i].substr(9);
    } else {
      rest.push_back(args[i]);
    }
  }
  if (!config_path) return rest;

  json doc;
  try {
    const auto raw = io::read_file(*config_path);
    doc = json::parse(raw.begin(), raw.end());
  } catch (const json::exception& e) {
    throw CLI::ValidationError("--config", std::string("not valid JSON: ") + e.what());
  } catch (const io_error& e) {
    throw CLI::ValidationError("--config", e.what());
  }
  if (!doc.is_object()) throw CLI::ValidationError("--config", "config file must hold a JSON object");

  std::vector<std::string> injected;
  for (const auto& [key, value] : doc.items()) {
    if (value.is_boolean()) {
      if (value.get<bool>()) injected.push_back("--" + key);
      continue;
    }
    if (value.is_object() || value.is_null()) throw CLI::ValidationError("--config", "unsupported value for " + key);
    injected.push_back("--" + key);
    injected.push_back(json_scalar_token(value));
  }
  // Position after the subcommand path (skipping leading global options is not needed: there are none).
  std::size_t pos = 0;
  if (pos < rest.size() && rest[pos].rfind("-", 0) != 0) {
    ++pos;
    if (nested.count(rest[0]) && pos < rest.size() && rest[pos].rfind("-", 0) != 0) ++pos;
  }
  rest.insert(rest.begin() + static_cast<std::ptrdiff_t>(pos), injected.begin(), injected.end());
  return rest;
}

/// Every option of `app` (except help) with its resolved value, as strings.
inline json resolved_config(const CLI::App* app) {
  json out = json::object();
  for (const CLI::Option* opt : app->get_options()) {
    if (opt->get_lnames().empty()) continue;
    const std::string name = opt->get_lnames().front();
    if (name == "help") continue;
    if (opt->get_type_size() == 0) {
      out[name] = opt->count() > 0;
    } else if (opt->count() > 0) {
      out[name] = opt->results().back();
    } else if (!opt->get_default_str().empty()) {
      out[name] = opt->get_default_str();
    }
  }
  return out;
}

class run_record {
 public:
  run_record(std::string command, json config, std::uint64_t seed, fs::path out_dir)
      : command_(std::move(command)), config_(std::move(config)), seed_(seed), out_dir_(std::move(out_dir)) {
    std::error_code ec;
    fs::create_directories(out_dir_, ec);
    if (ec) throw io_error("cannot create output directory " + out_dir_.string() + ": " + ec.message());
  }

  const fs::path& out_dir() const noexcept { return out_dir_; }

  fs::path write(const std::string& name, const std::string& content) {
    const fs::path p = out_dir_ / name;
    io::write_file(p, content);
    artifacts_[name] = io::hex32(io::crc32_of(content));
    return p;
  }

  void add_artifact(const fs::path& path) {
    artifacts_[fs::relative(path, out_dir_).generic_string()] = io::hex32(io::crc32_of(io::read_file(path)));
  }

  void finish() {
    json j{{"command", command_}, {"config", config_}, {"seed", seed_}, {"artifacts", artifacts_}};
    io::write_file(out_dir_ / "run.json", j.dump(2) + "\n");
  }

 private:
  std::string command_;
  json config_;
  std::uint64_t seed_;
  fs::path out_dir_;
  std::map<std::string, std::string> artifacts_;
};

inline std::span<const data::sample_record> pick_split(const data::dataset& d, const std::string& split) {
  if (split == "train") return d.train();
  if (split == "test") return d.test();
  if (split == "all") return d.records();
  throw argument_error("split must be train, test or all");
}

}  // namespace detail

/// Signal-driven shutdown hook for `serve`; tests replace it to stop the server themselves.
inline std::function<void(httplib::Server&)> serve_hook;

/**
 * Entry point shared by the prednet executable and the tests.
 * Returns 0 on success, 1 for usage errors and 2 for runtime failures.
 */
inline int run(const std::vector<std::string>& argv_in, std::ostream& out, std::ostream& err) {
  CLI::App app{"prednet: attention-mask attribute network toolkit"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");
  app.add_option("--config", "JSON file whose keys are long option names of the chosen subcommand");

  // dataset gen
  data::dataset_config ds;
  std::string ds_out = "dataset";
  std::size_t ds_size = ds.height;
  auto* dataset_cmd = app.add_subcommand("dataset", "Dataset utilities");
  dataset_cmd->require_subcommand(1);
  auto* gen = dataset_cmd->add_subcommand("gen", "Generate the synthetic attribute dataset");
  gen->add_option("--out", ds_out, "Output directory");
  gen->add_option("--attributes", ds.attributes, "Number of attributes K")->check(CLI::Range(2, 10));
  gen->add_option("--size", ds_size, "Image height and width in pixels")->check(CLI::Range(8, 256));
  gen->add_option("--count", ds.count, "Total samples");
  gen->add_option("--train", ds.train_count, "Samples in the training split (the rest are test)");
  gen->add_option("--seed", ds.seed, "Generator seed");

  // train
  train_config tc;
  std::string data_dir = "dataset", model_path = "model.apnet", out_dir = ".", optimizer = "momentum";
  std::uint64_t init_seed = 1;
  auto* train_cmd = app.add_subcommand("train", "Train a network on a generated dataset");
  train_cmd->add_option("--data", data_dir, "Dataset directory");
  train_cmd->add_option("--out", model_path, "Checkpoint path to write");
  train_cmd->add_option("--out-dir", out_dir, "Directory for the training log and run.json");
  train_cmd->add_option("--lambda", tc.lambda, "Weight of the mask L1 penalty");
  train_cmd->add_option("--lr", tc.learning_rate, "Learning rate");
  train_cmd->add_option("--momentum", tc.momentum, "Momentum coefficient");
  train_cmd->add_option("--batch", tc.batch_size, "Minibatch size");
  train_cmd->add_option("--epochs", tc.epochs, "Epochs");
  train_cmd->add_option("--seed", tc.seed, "Seed for shuffling");
  train_cmd->add_option("--init-seed", init_seed, "Seed for weight initialization");
  train_cmd->add_option("--optimizer", optimizer, "sgd or momentum")->check(CLI::IsMember({"sgd", "momentum"}));

  // eval
  std::string split = "test";
  double threshold = 0.5, noise_sigma = 0.0;
  std::uint64_t eval_seed = 1;
  auto* eval_cmd = app.add_subcommand("eval", "Per-attribute accuracy of a checkpoint");
  eval_cmd->add_option("--model", model_path, "Checkpoint");
  eval_cmd->add_option("--data", data_dir, "Dataset directory");
  eval_cmd->add_option("--split", split, "train, test or all")->check(CLI::IsMember({"train", "test", "all"}));
  eval_cmd->add_option("--threshold", threshold, "Decision threshold");
  eval_cmd->add_option("--noise-sigma", noise_sigma, "Gaussian noise applied to inputs");
  eval_cmd->add_option("--seed", eval_seed, "Noise seed");
  eval_cmd->add_option("--out-dir", out_dir, "Directory for accuracy.csv and run.json");

  // analyze
  std::size_t samples = 512, top = 5;
  std::string analyze_split = "train";
  auto* analyze_cmd = app.add_subcommand("analyze", "Mean-mask matrix, channel and attribute correlations");
  analyze_cmd->add_option("--model", model_path, "Checkpoint");
  analyze_cmd->add_option("--data", data_dir, "Dataset directory");
  analyze_cmd->add_option("--split", analyze_split, "Records to analyze")->check(CLI::IsMember({"train", "test", "all"}));
  analyze_cmd->add_option("--samples", samples, "Sample limit")->check(CLI::PositiveNumber);
  analyze_cmd->add_option("--top", top, "Correlated attributes listed per attribute");
  analyze_cmd->add_option("--out-dir", out_dir, "Output directory");

  // prune-curve
  std::string budgets = "8,16,32,48,64";
  std::size_t seeds = 10;
  double prune_threshold = 0.9;
  std::uint64_t curve_seed = 1;
  auto* curve_cmd = app.add_subcommand("prune-curve", "Accuracy under semantic vs random channel pruning");
  curve_cmd->add_option("--model", model_path, "Checkpoint");
  curve_cmd->add_option("--data", data_dir, "Dataset directory");
  curve_cmd->add_option("--budgets", budgets, "Comma-separated channel budgets");
  curve_cmd->add_option("--seeds", seeds, "Random plans per budget")->check(CLI::PositiveNumber);
  curve_cmd->add_option("--seed", curve_seed, "First random seed");
  curve_cmd->add_option("--threshold", prune_threshold, "Correlation threshold for semantic pairs");
  curve_cmd->add_option("--samples", samples, "Training records used for mask statistics");
  curve_cmd->add_option("--out-dir", out_dir, "Output directory");

  // robustness
  std::string sigmas = "0,0.1,0.2,0.3,0.4,0.5", ns = "1,2,3", betas = "0,0.25,0.5";
  bool unclamped = false;
  std::uint64_t noise_seed_value = 1;
  auto* robust_cmd = app.add_subcommand("robustness", "Accuracy under input noise for a grid of mask transforms");
  robust_cmd->add_option("--model", model_path, "Checkpoint");
  robust_cmd->add_option("--data", data_dir, "Dataset directory");
  robust_cmd->add_option("--sigmas", sigmas, "Comma-separated noise levels");
  robust_cmd->add_option("--n", ns, "Comma-separated emphasis exponents");
  robust_cmd->add_option("--beta", betas, "Comma-separated suppression biases");
  robust_cmd->add_flag("--unclamped", unclamped, "Do not clamp g to [0, 1]");
  robust_cmd->add_option("--seed", noise_seed_value, "Noise seed");
  robust_cmd->add_option("--out-dir", out_dir, "Output directory");

  // regress-demo
  regression::demo_protocol proto;
  std::string basis = "all";
  auto* regress_cmd = app.add_subcommand("regress-demo", "Coefficient-perturbation locality of three series bases");
  regress_cmd->add_option("--order", proto.order, "Series order N (2N + 1 coefficients)")->check(CLI::Range(1, 20));
  regress_cmd->add_option("--basis", basis, "naive, legendre, fourier or all")
      ->check(CLI::IsMember({"naive", "legendre", "fourier", "all"}));
  regress_cmd->add_option("--delta", proto.delta, "Perturbation added to the coefficient");
  regress_cmd->add_option("--index", proto.index, "Coefficient to perturb");
  regress_cmd->add_option("--points", proto.points, "Grid points on [-1, 1]")->check(CLI::Range(16, 1000000));
  regress_cmd->add_option("--out-dir", out_dir, "Output directory");

  // serve
  std::string bind;
  service::session_options sopt;
  auto* serve_cmd = app.add_subcommand("serve", "HTTP service for interactive perturbation");
  serve_cmd->add_option("--model", model_path, "Checkpoint");
  serve_cmd->add_option("--data", data_dir, "Dataset directory");
  serve_cmd->add_option("--bind", bind, "host:port (default from PREDNET_BIND, else 127.0.0.1:8080)");
  serve_cmd->add_option("--analysis-samples", sopt.analysis_samples, "Records used for mask statistics");
  serve_cmd->add_option("--accuracy-samples", sopt.accuracy_samples, "Held-out records used for accuracy");

  std::vector<std::string> args;
  try {
    args = detail::expand_config(argv_in, {"dataset"});
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? success : usage_error;
  }

  auto echo = [&](const CLI::App* sub) {
    json cfg = detail::resolved_config(sub);
    out << "resolved config: " << cfg.dump() << "\n";
    return cfg;
  };

  try {
    if (gen->parsed()) {
      ds.height = ds.width = ds_size;
      const auto cfg = echo(gen);
      data::generate_dataset(ds, ds_out);
      detail::run_record rec("dataset gen", cfg, ds.seed, ds_out);
      for (const char* f : {"manifest.json", "labels.csv", "checksums.txt"}) rec.add_artifact(fs::path(ds_out) / f);
      rec.finish();
      out << "wrote " << ds.count << " samples to " << ds_out << "\n";
    } else if (train_cmd->parsed()) {
      tc.optimizer = parse_optimizer(optimizer);
      const auto cfg = echo(train_cmd);
      const auto d = data::load_dataset(data_dir);
      auto net = attrnet::create(d.manifest().attribute_names, init_seed);
      detail::run_record rec("train", cfg, tc.seed, out_dir);
      const auto history = train(net, d.train(), tc, d.test(), [&](const epoch_record& r) {
        out << "epoch " << r.epoch << " loss " << r.loss.total << " bce " << r.loss.bce << " mask_l1 "
            << r.loss.mask_l1 << " mean_acc " << r.mean_accuracy << "\n";
      });
      save_checkpoint(net, model_path);
      rec.write("training_log.csv", training_log_csv(history));
      rec.add_artifact(fs::absolute(model_path));
      rec.finish();
    } else if (eval_cmd->parsed()) {
      const auto cfg = echo(eval_cmd);
      const auto net = load_checkpoint(model_path);
      const auto d = data::load_dataset(data_dir);
      const auto records = detail::pick_split(d, split);
      std::vector<tensor> noisy;
      for (const auto& r : records) noisy.push_back(data::add_gaussian_noise(r.image, noise_sigma, noise_seed(eval_seed, noise_sigma, r.id)));
      const auto preds = predict_variants(net, records, {head_variant{}}, &noisy);
      const auto report = accuracy_from_predictions(preds[0], labels_of(records), threshold);
      std::ostringstream csv;
      csv.precision(9);
      csv << "attribute,accuracy\n";
      for (std::size_t k = 0; k < report.per_attribute.size(); ++k) {
        csv << net.attribute_names[k] << ',' << report.per_attribute[k] << '\n';
        out << net.attribute_names[k] << ": " << report.per_attribute[k] << "\n";
      }
      csv << "mean," << report.mean << '\n';
      out << "mean accuracy: " << report.mean << "\n";
      detail::run_record rec("eval", cfg, eval_seed, out_dir);
      rec.write("accuracy.csv", csv.str());
      rec.finish();
    } else if (analyze_cmd->parsed()) {
      const auto cfg = echo(analyze_cmd);
      const auto net = load_checkpoint(model_path);
      const auto d = data::load_dataset(data_dir);
      const auto stats = mean_mask_matrix(net, detail::pick_split(d, analyze_split), samples);
      const auto channels = channel_correlation(stats);
      const auto attrs = attribute_correlation(stats, net.attribute_names);
      if (top >= net.attribute_count()) top = net.attribute_count() - 1;
      std::ostringstream ranking;
      ranking.precision(9);
      ranking << "attribute,rank,other,coefficient\n";
      for (std::size_t k = 0; k < net.attribute_count(); ++k) {
        const auto ranked = top_correlated_attributes(attrs, k, top);
        for (std::size_t i = 0; i < ranked.size(); ++i) {
          ranking << net.attribute_names[k] << ',' << i + 1 << ',' << ranked[i].name << ',';
          if (ranked[i].defined) ranking << ranked[i].coefficient;
          ranking << '\n';
        }
      }
      detail::run_record rec("analyze", cfg, 0, out_dir);
      rec.write("mask_stats.csv", mask_stats_csv(stats, net.attribute_names));
      rec.write("channel_correlation.csv", correlation_csv(channels));
      rec.write("attribute_correlation.csv", correlation_csv(attrs));
      rec.write("top_correlated_attributes.csv", ranking.str());
      rec.finish();
      out << "analyzed " << stats.samples << " samples into " << out_dir << "\n";
    } else if (curve_cmd->parsed()) {
      const auto cfg = echo(curve_cmd);
      pruning_curve_options opt;
      opt.budgets = detail::parse_list<std::size_t>(budgets, "--budgets");
      opt.random_seeds = seeds;
      opt.seed = curve_seed;
      opt.threshold = prune_threshold;
      opt.sample_limit = samples;
      const auto net = load_checkpoint(model_path);
      const auto d = data::load_dataset(data_dir);
      const auto rows = pruning_curve(net, d.train(), d.test(), opt);
      for (const auto& p : summarize_pruning_curve(rows)) {
        out << "budget " << p.budget << ": semantic " << p.semantic << " random " << p.random << "\n";
      }
      detail::run_record rec("prune-curve", cfg, curve_seed, out_dir);
      rec.write("prune_curve.csv", pruning_curve_csv(rows));
      rec.finish();
    } else if (robust_cmd->parsed()) {
      const auto cfg = echo(robust_cmd);
      std::vector<mask_transform_params> grid;
      for (double n : detail::parse_list<double>(ns, "--n"))
        for (double b : detail::parse_list<double>(betas, "--beta")) grid.push_back({n, b, !unclamped});
      const auto net = load_checkpoint(model_path);
      const auto d = data::load_dataset(data_dir);
      const auto table = robustness_sweep(net, d.test(), detail::parse_list<double>(sigmas, "--sigmas"), grid,
                                          noise_seed_value);
      detail::run_record rec("robustness", cfg, noise_seed_value, out_dir);
      rec.write("robustness.csv", robustness_csv(table));
      rec.finish();
      out << "wrote " << table.sigmas.size() * table.grid.size() << " rows to " << (fs::path(out_dir) / "robustness.csv").string() << "\n";
    } else if (regress_cmd->parsed()) {
      const auto cfg = echo(regress_cmd);
      std::vector<regression::basis_kind> kinds;
      if (basis == "all") kinds = {regression::basis_kind::naive, regression::basis_kind::legendre, regression::basis_kind::fourier};
      else kinds = {regression::parse_basis(basis)};
      if (proto.index >= regression::coefficient_count(proto.order)) {
        throw argument_error("--index must be below 2 * order + 1");
      }
      const auto results = regression::run_demo(kinds, proto);
      detail::run_record rec("regress-demo", cfg, 0, out_dir);
      rec.write("locality_report.csv", regression::locality_csv(results));
      for (const auto& r : results) {
        rec.write(regression::to_string(r.kind) + ".dat", regression::curve_dat(r));
        out << regression::to_string(r.kind) << ": max other-coefficient change " << r.max_other_change
            << ", L2^2 change " << r.l2_squared_change << "\n";
      }
      rec.finish();
    } else if (serve_cmd->parsed()) {
      const auto cfg = echo(serve_cmd);
      const auto addr = service::resolve_bind(bind.empty() ? std::nullopt : std::optional<std::string>(bind));
      service::session session(load_checkpoint(model_path), data::load_dataset(data_dir), sopt);
      httplib::Server server;
      service::register_routes(server, session);
      if (!server.bind_to_port(addr.host, addr.port)) {
        throw io_error("cannot bind " + addr.host + ":" + std::to_string(addr.port));
      }
      out << "serving on http://" << addr.host << ":" << addr.port << "\n" << std::flush;
      std::thread stopper;
      if (serve_hook) {
        stopper = std::thread([&] { serve_hook(server); });
      } else {
        sigset_t set;
        sigemptyset(&set);
        sigaddset(&set, SIGINT);
        sigaddset(&set, SIGTERM);
        pthread_sigmask(SIG_BLOCK, &set, nullptr);
        stopper = std::thread([&server, set] {
          int sig = 0;
          sigwait(&set, &sig);
          server.stop();
        });
      }
      server.listen_after_bind();
      if (serve_hook) stopper.join();
      else stopper.detach();
      out << "stopped\n";
    }
  } catch (const argument_error& e) {
    err << "error: " << e.what() << "\n";
    return usage_error;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return runtime_error;
  }
  return success;
}

}  // namespace prednet::cli
