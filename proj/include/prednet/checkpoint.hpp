// Copyright (c) 2026, prednet authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "prednet/attrnet.hpp"
#include "prednet/errors.hpp"
#include "prednet/io.hpp"

/**
 * `.apnet` checkpoint files.
 *
 * Layout: an ASCII header terminated by the line "end", then every tensor
 * listed in the header as little-endian IEEE-754 binary32 in header order,
 * then a little-endian CRC-32 of everything before it.
 *
 *     prednet-checkpoint 1
 *     attributes 2
 *     attribute red_object
 *     attribute warm_object
 *     metadata lambda=1e-05 seed=7 epochs=20
 *     tensor extractor.0.conv.weight f32 32x3x3x3
 *     ...
 *     end
 */
namespace prednet {

inline constexpr int checkpoint_version = 1;
inline constexpr std::string_view checkpoint_magic = "prednet-checkpoint";

namespace detail {

struct checkpoint_entry {
  std::string name;
  std::span<float> values;
  shape_t shape;
};

/// Every persisted array of the network, parameters first, then BN statistics and the gate.
inline std::vector<checkpoint_entry> checkpoint_entries(attrnet& net) {
  std::vector<checkpoint_entry> out;
  for (auto& p : net.parameters()) out.push_back({p.name, p.tensor->data(), p.tensor->shape()});
  for (std::size_t i = 0; i < net.blocks.size(); ++i) {
    auto& s = net.blocks[i].stats;
    const std::string prefix = "extractor." + std::to_string(i) + ".bn.";
    out.push_back({prefix + "running_mean", std::span<float>(s.running_mean), {s.running_mean.size()}});
    out.push_back({prefix + "running_var", std::span<float>(s.running_var), {s.running_var.size()}});
  }
  out.push_back({"channel_gate", std::span<float>(net.channel_gate), {net.channel_gate.size()}});
  return out;
}

inline std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string shape_token(const shape_t& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

inline void append_u32(io::bytes& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

inline std::uint32_t read_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

inline void check_name_token(const std::string& name) {
  if (name.empty() || name.find_first_of(" \t\r\n") != std::string::npos) {
    throw argument_error("checkpoint names must be non-empty and free of whitespace: '" + name + "'");
  }
}

}  // namespace detail

inline io::bytes serialize_checkpoint(const attrnet& model) {
  attrnet net = model;
  auto entries = detail::checkpoint_entries(net);
  std::string header = std::string(checkpoint_magic) + " " + std::to_string(checkpoint_version) + "\n";
  header += "attributes " + std::to_string(net.attribute_names.size()) + "\n";
  for (const auto& name : net.attribute_names) {
    detail::check_name_token(name);
    header += "attribute " + name + "\n";
  }
  header += "metadata lambda=" + detail::format_double(net.metadata.lambda) +
            " seed=" + std::to_string(net.metadata.seed) + " epochs=" + std::to_string(net.metadata.epochs) + "\n";
  for (const auto& e : entries) header += "tensor " + e.name + " f32 " + detail::shape_token(e.shape) + "\n";
  header += "end\n";

  io::bytes out(header.begin(), header.end());
  for (const auto& e : entries) {
    for (float v : e.values) detail::append_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  detail::append_u32(out, io::crc32_of(out));
  return out;
}

inline attrnet deserialize_checkpoint(const io::bytes& data) {
  // Header: parse line by line without trusting any length until "end".
  std::size_t pos = 0;
  auto next_line = [&]() -> std::string {
    const auto* begin = data.data() + pos;
    const auto* end = data.data() + data.size();
    const auto* nl = std::find(begin, end, '\n');
    if (nl == end) throw format_error("checkpoint truncated inside header");
    std::string line(begin, nl);
    pos += line.size() + 1;
    return line;
  };

  std::istringstream first(next_line());
  std::string magic;
  int version = 0;
  first >> magic >> version;
  if (magic != checkpoint_magic) throw format_error("not a prednet checkpoint");
  if (version != checkpoint_version) {
    throw version_error("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                        std::to_string(checkpoint_version) + ")");
  }

  auto expect_keyword = [](std::istringstream& in, const char* keyword) {
    std::string word;
    in >> word;
    if (word != keyword) throw format_error(std::string("checkpoint header: expected '") + keyword + "'");
  };

  std::istringstream count_line(next_line());
  expect_keyword(count_line, "attributes");
  std::size_t k = 0;
  if (!(count_line >> k) || k == 0 || k > 4096) throw format_error("checkpoint header: bad attribute count");
  std::vector<std::string> names;
  for (std::size_t i = 0; i < k; ++i) {
    std::istringstream line(next_line());
    expect_keyword(line, "attribute");
    std::string name;
    line >> name;
    names.push_back(name);
  }

  training_metadata meta;
  {
    std::istringstream line(next_line());
    expect_keyword(line, "metadata");
    std::string field;
    while (line >> field) {
      const auto eq = field.find('=');
      if (eq == std::string::npos) throw format_error("checkpoint header: bad metadata field");
      const std::string key = field.substr(0, eq);
      const char* first_char = field.data() + eq + 1;
      const char* last_char = field.data() + field.size();
      std::from_chars_result r{};
      if (key == "lambda") r = std::from_chars(first_char, last_char, meta.lambda);
      else if (key == "seed") r = std::from_chars(first_char, last_char, meta.seed);
      else if (key == "epochs") r = std::from_chars(first_char, last_char, meta.epochs);
      else throw format_error("checkpoint header: unknown metadata key " + key);
      if (r.ec != std::errc{} || r.ptr != last_char) throw format_error("checkpoint header: bad value for " + key);
    }
  }

  attrnet net = attrnet::create(names, 0);
  net.metadata = meta;
  auto entries = detail::checkpoint_entries(net);
  for (const auto& e : entries) {
    std::istringstream line(next_line());
    std::string keyword, name, dtype, shape;
    line >> keyword >> name >> dtype >> shape;
    if (keyword != "tensor" || name != e.name || dtype != "f32" || shape != detail::shape_token(e.shape)) {
      throw format_error("checkpoint header: expected tensor " + e.name + " f32 " + detail::shape_token(e.shape) +
                         ", found '" + keyword + " " + name + " " + dtype + " " + shape + "'");
    }
  }
  if (next_line() != "end") throw format_error("checkpoint header: missing 'end'");

  std::size_t payload = 0;
  for (const auto& e : entries) payload += shape_size(e.shape) * 4;
  if (data.size() < pos + payload + 4) throw format_error("checkpoint truncated: payload incomplete");
  if (data.size() > pos + payload + 4) throw format_error("checkpoint has trailing bytes");

  const std::uint32_t stored = detail::read_u32(data.data() + pos + payload);
  if (stored != io::crc32_of(data.data(), pos + payload)) throw checksum_error("checkpoint checksum mismatch");

  for (auto& e : entries) {
    for (auto& v : e.values) {
      v = std::bit_cast<float>(detail::read_u32(data.data() + pos));
      pos += 4;
    }
  }
  for (float g : net.channel_gate) {
    if (g != 0.0f && g != 1.0f) throw format_error("checkpoint channel gate must be binary");
  }
  return net;
}

inline void save_checkpoint(const attrnet& net, const std::filesystem::path& path) {
  io::write_file(path, serialize_checkpoint(net));
}

inline attrnet load_checkpoint(const std::filesystem::path& path) { return deserialize_checkpoint(io::read_file(path)); }

}  // namespace prednet
