// Copyright (c) 2026, prednet authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "prednet/errors.hpp"
#include "prednet/io.hpp"
#include "prednet/tensor.hpp"

/**
 * Procedural multi-attribute image dataset.
 *
 * Each sample is a single shape on a background. The latent scene is a pure
 * function of (seed, id); labels are read off the scene and the image is
 * rendered from it. Two attribute pairs are deliberately tied together so that
 * attribute correlation analysis has known structure to recover. Each pair
 * reads one scene factor at two granularities: every red object is warm (a few
 * orange ones are warm but not red), and every object with horizontal stripes
 * is striped (a few carry vertical stripes instead).
 */
namespace prednet::data {

inline constexpr int manifest_version = 1;

struct attribute_spec {
  std::string name;
  std::string correlation_group;  // empty when independent
};

inline const std::vector<attribute_spec>& attribute_catalog() {
  static const std::vector<attribute_spec> catalog{
      {"red_object", "warmth"},     {"warm_object", "warmth"},     {"striped_object", "stripes"},
      {"horizontal_stripes", "stripes"}, {"large_object", ""},      {"outlined_object", ""},
      {"round_object", ""},         {"left_position", ""},         {"corner_marker", ""},
      {"upper_position", ""},
  };
  return catalog;
}

/// Share of non-red objects drawn orange, and of objects without horizontal stripes given vertical ones.
inline constexpr double minority_rate = 0.12;

struct scene {
  bool red, warm, striped, horizontal, large, outlined, round, left, marker, upper;
  double center_x, center_y, radius;  // fractions of width / height / min side
  double bg_jitter[3];
  double fg_jitter[3];

  std::vector<bool> attributes() const {
    return {red, warm, striped, horizontal, large, outlined, round, left, marker, upper};
  }
};

namespace detail {

class sample_rng {
 public:
  sample_rng(std::uint64_t seed, std::uint64_t id) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(id), static_cast<std::uint32_t>(id >> 32), 0x5eedu};
    engine_.seed(seq);
  }
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  bool coin(double p = 0.5) { return uniform() < p; }

 private:
  std::mt19937_64 engine_;
};

inline std::uint8_t quantize(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace detail

inline scene sample_scene(std::uint64_t seed, std::uint64_t id) {
  detail::sample_rng rng(seed, id);
  scene s{};
  s.red = rng.coin();
  const bool orange = rng.coin(minority_rate);
  s.warm = s.red || orange;
  s.horizontal = rng.coin();
  const bool vertical = rng.coin(minority_rate);
  s.striped = s.horizontal || vertical;
  s.large = rng.coin();
  s.outlined = rng.coin();
  s.round = rng.coin();
  s.left = rng.coin();
  s.marker = rng.coin();
  s.upper = rng.coin();
  s.center_x = s.left ? rng.uniform(0.24, 0.36) : rng.uniform(0.64, 0.76);
  s.center_y = s.upper ? rng.uniform(0.26, 0.38) : rng.uniform(0.62, 0.74);
  s.radius = s.large ? rng.uniform(0.30, 0.34) : rng.uniform(0.18, 0.22);
  for (double& j : s.bg_jitter) j = rng.uniform(-0.06, 0.06);
  for (double& j : s.fg_jitter) j = rng.uniform(-0.06, 0.06);
  return s;
}

inline std::vector<std::uint8_t> derive_labels(const scene& s, std::size_t k) {
  const auto attrs = s.attributes();
  if (k > attrs.size()) throw argument_error("at most " + std::to_string(attrs.size()) + " attributes supported");
  std::vector<std::uint8_t> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = attrs[i] ? 1 : 0;
  return out;
}

/// Renders the scene as 8-bit RGB (H x W x 3).
inline std::vector<std::uint8_t> render_scene(const scene& s, std::size_t height, std::size_t width) {
  const double side = static_cast<double>(std::min(height, width));
  const double cx = s.center_x * static_cast<double>(width);
  const double cy = s.center_y * static_cast<double>(height);
  const double r = s.radius * side;
  const double outline = std::max(1.0, 0.08 * side);
  const double stripe = std::max(1.0, 0.06 * side);
  const std::size_t marker = std::max<std::size_t>(3, static_cast<std::size_t>(std::lround(0.15 * side)));
  const double bg_base[3] = {0.42, 0.46, 0.44};
  const double red[3] = {0.85, 0.12, 0.10}, orange[3] = {0.95, 0.55, 0.10}, blue[3] = {0.12, 0.22, 0.85};
  const double* fg_base = s.red ? red : (s.warm ? orange : blue);

  std::vector<std::uint8_t> px(height * width * 3);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      double rgb[3];
      for (int c = 0; c < 3; ++c) rgb[c] = bg_base[c] + s.bg_jitter[c];

      const double dx = static_cast<double>(x) + 0.5 - cx;
      const double dy = static_cast<double>(y) + 0.5 - cy;
      const double half = s.round ? r : 0.9 * r;
      const double dist = s.round ? std::sqrt(dx * dx + dy * dy) : std::max(std::abs(dx), std::abs(dy));
      if (dist <= half) {
        if (s.outlined && half - dist < outline) {
          for (double& v : rgb) v = 0.05;
        } else {
          const double across = s.horizontal ? dy : dx;
          const bool dark_band = s.striped && static_cast<long>(std::floor((across + half) / stripe)) % 2 == 1;
          for (int c = 0; c < 3; ++c) rgb[c] = (fg_base[c] + s.fg_jitter[c]) * (dark_band ? 0.35 : 1.0);
        }
      }
      if (s.marker && x + 1 + marker >= width && x + 1 < width && y >= 1 && y < 1 + marker) {
        for (double& v : rgb) v = 1.0;
      }
      for (int c = 0; c < 3; ++c) px[(y * width + x) * 3 + c] = detail::quantize(rgb[c]);
    }
  }
  return px;
}

struct dataset_config {
  std::size_t attributes = 8;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t count = 2500;
  std::size_t train_count = 2000;
  std::uint64_t seed = 7;
};

struct split_range {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
};

struct dataset_manifest {
  int version = manifest_version;
  std::vector<std::string> attribute_names;
  std::map<std::string, std::vector<std::string>> correlation_groups;
  std::size_t height = 0, width = 0, count = 0;
  split_range train, test;
  std::uint64_t seed = 0;

  std::size_t attribute_count() const { return attribute_names.size(); }
};

inline nlohmann::json to_json(const dataset_manifest& m) {
  nlohmann::json j;
  j["format"] = "prednet-dataset";
  j["version"] = m.version;
  j["attributes"] = m.attribute_names;
  j["attribute_count"] = m.attribute_count();
  j["correlation_groups"] = m.correlation_groups;
  j["height"] = m.height;
  j["width"] = m.width;
  j["channels"] = 3;
  j["count"] = m.count;
  j["splits"] = {{"train", {m.train.begin, m.train.end}}, {"test", {m.test.begin, m.test.end}}};
  j["seed"] = m.seed;
  return j;
}

inline dataset_manifest manifest_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "prednet-dataset") throw format_error("manifest: not a prednet dataset");
  dataset_manifest m;
  m.version = j.at("version").get<int>();
  if (m.version != manifest_version) {
    throw version_error("manifest version " + std::to_string(m.version) + " is not supported");
  }
  m.attribute_names = j.at("attributes").get<std::vector<std::string>>();
  m.correlation_groups = j.at("correlation_groups").get<std::map<std::string, std::vector<std::string>>>();
  m.height = j.at("height").get<std::size_t>();
  m.width = j.at("width").get<std::size_t>();
  m.count = j.at("count").get<std::size_t>();
  const auto& s = j.at("splits");
  m.train = {s.at("train").at(0).get<std::size_t>(), s.at("train").at(1).get<std::size_t>()};
  m.test = {s.at("test").at(0).get<std::size_t>(), s.at("test").at(1).get<std::size_t>()};
  m.seed = j.at("seed").get<std::uint64_t>();
  return m;
}

/// One sample: image as H x W x 3 floats in [0, 1] plus K binary labels.
struct sample_record {
  std::uint64_t id = 0;
  tensor image;
  std::vector<std::uint8_t> labels;
};

class dataset {
 public:
  dataset() = default;
  dataset(dataset_manifest manifest, std::vector<sample_record> records)
      : manifest_(std::move(manifest)), records_(std::move(records)) {}

  const dataset_manifest& manifest() const noexcept { return manifest_; }
  const std::vector<sample_record>& records() const noexcept { return records_; }
  std::size_t size() const noexcept { return records_.size(); }
  const sample_record& operator[](std::size_t i) const { return records_.at(i); }

  std::span<const sample_record> train() const { return slice(manifest_.train); }
  std::span<const sample_record> test() const { return slice(manifest_.test); }

 private:
  std::span<const sample_record> slice(split_range r) const {
    return std::span<const sample_record>(records_).subspan(r.begin, r.size());
  }

  dataset_manifest manifest_;
  std::vector<sample_record> records_;
};

inline void validate(const dataset_config& c) {
  if (c.attributes < 2) throw argument_error("dataset needs K >= 2 attributes");
  if (c.attributes > attribute_catalog().size()) {
    throw argument_error("dataset supports at most " + std::to_string(attribute_catalog().size()) + " attributes");
  }
  if (c.count < 10) throw argument_error("dataset needs at least 10 samples");
  if (c.train_count > c.count) throw argument_error("train split larger than dataset");
  if (c.height < 8 || c.width < 8) throw argument_error("images must be at least 8 x 8");
}

inline dataset_manifest make_manifest(const dataset_config& c) {
  dataset_manifest m;
  for (std::size_t i = 0; i < c.attributes; ++i) {
    const auto& spec = attribute_catalog()[i];
    m.attribute_names.push_back(spec.name);
    if (!spec.correlation_group.empty()) m.correlation_groups[spec.correlation_group].push_back(spec.name);
  }
  m.height = c.height;
  m.width = c.width;
  m.count = c.count;
  m.train = {0, c.train_count};
  m.test = {c.train_count, c.count};
  m.seed = c.seed;
  return m;
}

inline tensor image_from_pixels(const std::vector<std::uint8_t>& px, std::size_t height, std::size_t width) {
  tensor img({height, width, 3});
  for (std::size_t i = 0; i < px.size(); ++i) img[i] = static_cast<float>(px[i]) / 255.0f;
  return img;
}

inline sample_record make_record(const dataset_manifest& m, std::uint64_t id) {
  const scene s = sample_scene(m.seed, id);
  return {id, image_from_pixels(render_scene(s, m.height, m.width), m.height, m.width),
          derive_labels(s, m.attribute_count())};
}

/// Builds the dataset in memory; identical to what generate_dataset writes and load_dataset reads back.
inline dataset build_dataset(const dataset_config& c) {
  validate(c);
  auto m = make_manifest(c);
  std::vector<sample_record> records;
  records.reserve(c.count);
  for (std::size_t id = 0; id < c.count; ++id) records.push_back(make_record(m, id));
  return dataset(std::move(m), std::move(records));
}

inline std::string labels_csv(const dataset_manifest& m, const std::vector<std::vector<std::uint8_t>>& labels) {
  std::string out = "id";
  for (std::size_t k = 0; k < m.attribute_count(); ++k) out += ",attr_" + std::to_string(k);
  out += '\n';
  for (std::size_t id = 0; id < labels.size(); ++id) {
    out += std::to_string(id);
    for (auto v : labels[id]) {
      out += ',';
      out += static_cast<char>('0' + v);
    }
    out += '\n';
  }
  return out;
}

inline std::string image_relpath(std::uint64_t id) { return "images/" + std::to_string(id) + ".png"; }

/**
 * Writes manifest.json, images/{id}.png, labels.csv and checksums.txt
 * (one "<crc32 hex>  <relative path>" line per file).
 */
inline dataset_manifest generate_dataset(const dataset_config& c, const std::filesystem::path& dir) {
  validate(c);
  const auto m = make_manifest(c);
  std::error_code ec;
  std::filesystem::create_directories(dir / "images", ec);
  if (ec) throw io_error("cannot create dataset directory " + dir.string() + ": " + ec.message());

  std::vector<std::pair<std::string, std::uint32_t>> sums;
  const std::string manifest_text = to_json(m).dump(2) + "\n";
  io::write_file(dir / "manifest.json", manifest_text);
  sums.emplace_back("manifest.json", io::crc32_of(manifest_text));

  std::vector<std::vector<std::uint8_t>> labels(c.count);
  std::vector<std::pair<std::string, std::uint32_t>> image_sums;
  for (std::size_t id = 0; id < c.count; ++id) {
    const scene s = sample_scene(c.seed, id);
    labels[id] = derive_labels(s, c.attributes);
    const auto png = io::encode_png_rgb(render_scene(s, c.height, c.width).data(), c.height, c.width);
    io::write_file(dir / image_relpath(id), png);
    image_sums.emplace_back(image_relpath(id), io::crc32_of(png));
  }
  const std::string csv = labels_csv(m, labels);
  io::write_file(dir / "labels.csv", csv);
  sums.emplace_back("labels.csv", io::crc32_of(csv));
  sums.insert(sums.end(), image_sums.begin(), image_sums.end());

  std::string listing;
  for (const auto& [path, crc] : sums) listing += io::hex32(crc) + "  " + path + "\n";
  io::write_file(dir / "checksums.txt", listing);
  return m;
}

namespace detail {

inline std::map<std::string, std::string> parse_checksums(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto sep = line.find("  ");
    if (sep != 8) throw format_error("checksums.txt: malformed line '" + line + "'");
    out[line.substr(sep + 2)] = line.substr(0, 8);
  }
  return out;
}

inline io::bytes read_verified(const std::filesystem::path& dir, const std::string& rel,
                               const std::map<std::string, std::string>& sums) {
  const auto path = dir / rel;
  if (!std::filesystem::exists(path)) throw io_error("dataset file missing: " + path.string());
  auto data = io::read_file(path);
  const auto it = sums.find(rel);
  if (it == sums.end()) throw checksum_error("no checksum recorded for " + rel);
  if (io::hex32(io::crc32_of(data)) != it->second) throw checksum_error("checksum mismatch for " + rel);
  return data;
}

}  // namespace detail

/// Loads and fully verifies a dataset directory. Nothing is returned unless every file checks out.
inline dataset load_dataset(const std::filesystem::path& dir) {
  const auto sums_path = dir / "checksums.txt";
  const auto manifest_path = dir / "manifest.json";
  if (!std::filesystem::exists(manifest_path)) throw io_error("dataset manifest missing: " + manifest_path.string());
  if (!std::filesystem::exists(sums_path)) throw io_error("dataset checksums missing: " + sums_path.string());
  const auto raw_sums = io::read_file(sums_path);
  const auto sums = detail::parse_checksums(std::string(raw_sums.begin(), raw_sums.end()));

  const auto manifest_bytes = detail::read_verified(dir, "manifest.json", sums);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(manifest_bytes.begin(), manifest_bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw format_error(std::string("manifest.json: ") + e.what());
  }
  dataset_manifest m;
  try {
    m = manifest_from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw format_error(std::string("manifest.json: ") + e.what());
  }

  const auto csv_bytes = detail::read_verified(dir, "labels.csv", sums);
  std::istringstream csv(std::string(csv_bytes.begin(), csv_bytes.end()));
  std::string line;
  std::getline(csv, line);
  std::vector<sample_record> records(m.count);
  for (std::size_t id = 0; id < m.count; ++id) {
    if (!std::getline(csv, line)) throw format_error("labels.csv: expected " + std::to_string(m.count) + " rows");
    std::istringstream row(line);
    std::string cell;
    std::getline(row, cell, ',');
    if (std::stoull(cell) != id) throw format_error("labels.csv: rows out of order at id " + std::to_string(id));
    records[id].id = id;
    while (std::getline(row, cell, ',')) {
      if (cell != "0" && cell != "1") throw format_error("labels.csv: non-binary label at id " + std::to_string(id));
      records[id].labels.push_back(static_cast<std::uint8_t>(cell[0] - '0'));
    }
    if (records[id].labels.size() != m.attribute_count()) {
      throw format_error("labels.csv: wrong label count at id " + std::to_string(id));
    }
  }
  for (std::size_t id = 0; id < m.count; ++id) {
    const auto img = io::decode_png_rgb(detail::read_verified(dir, image_relpath(id), sums));
    if (img.height != m.height || img.width != m.width) {
      throw format_error("image " + std::to_string(id) + " has unexpected dimensions");
    }
    records[id].image = image_from_pixels(img.pixels, m.height, m.width);
  }
  return dataset(std::move(m), std::move(records));
}

/// Deterministic permutation of [0, n).
inline std::vector<std::size_t> shuffled_order(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  // Fisher-Yates with an explicit draw so the permutation does not depend on the standard library.
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

/// Adds i.i.d. N(0, sigma^2) noise to every element, then clamps to [0, 1] unless clamp is false.
inline tensor add_gaussian_noise(const tensor& image, double sigma, std::uint64_t seed, bool clamp = true) {
  if (!(sigma >= 0.0)) throw argument_error("noise sigma must be >= 0");
  if (sigma == 0.0) return image;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, sigma);
  tensor out = image;
  for (auto& v : out.data()) {
    const double noisy = v + dist(rng);
    v = static_cast<float>(clamp ? std::clamp(noisy, 0.0, 1.0) : noisy);
  }
  return out;
}

/// Stacks selected H x W x 3 images into an N x 3 x H x W batch.
inline tensor stack_images(std::span<const tensor> images, std::span<const std::size_t> indices) {
  if (indices.empty()) throw argument_error("empty batch");
  const auto& first = images[indices[0]];
  const std::size_t h = first.dim(0), w = first.dim(1), plane = h * w;
  tensor batch({indices.size(), 3, h, w});
  for (std::size_t n = 0; n < indices.size(); ++n) {
    const auto& img = images[indices[n]];
    if (img.shape() != first.shape()) throw dimension_error("batch images differ in size");
    for (std::size_t p = 0; p < plane; ++p)
      for (std::size_t c = 0; c < 3; ++c) batch[(n * 3 + c) * plane + p] = img[p * 3 + c];
  }
  return batch;
}

inline tensor make_image_batch(std::span<const sample_record> records, std::span<const std::size_t> indices) {
  if (indices.empty()) throw argument_error("empty batch");
  std::vector<tensor> picked;
  picked.reserve(indices.size());
  for (auto i : indices) picked.push_back(records[i].image);
  std::vector<std::size_t> local(indices.size());
  std::iota(local.begin(), local.end(), std::size_t{0});
  return stack_images(picked, local);
}

inline tensor make_label_batch(std::span<const sample_record> records, std::span<const std::size_t> indices) {
  const std::size_t k = records[indices[0]].labels.size();
  tensor labels({indices.size(), k});
  for (std::size_t n = 0; n < indices.size(); ++n)
    for (std::size_t j = 0; j < k; ++j) labels[n * k + j] = records[indices[n]].labels[j];
  return labels;
}

/// Single image H x W x 3 -> 1 x 3 x H x W.
inline tensor image_to_batch(const tensor& image) {
  const std::size_t h = image.dim(0), w = image.dim(1), plane = h * w;
  tensor batch({1, 3, h, w});
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c) batch[c * plane + p] = image[p * 3 + c];
  return batch;
}

}  // namespace prednet::data
