// Copyright (c) 2026, prednet authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <png.h>
#include <zlib.h>

#include <algorithm>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "prednet/errors.hpp"

namespace prednet::io {

using bytes = std::vector<unsigned char>;

inline std::uint32_t crc32_of(const void* data, std::size_t size) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  const auto* p = static_cast<const Bytef*>(data);
  while (size > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
    crc = ::crc32(crc, p, chunk);
    p += chunk;
    size -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

inline std::uint32_t crc32_of(const bytes& b) { return crc32_of(b.data(), b.size()); }
inline std::uint32_t crc32_of(std::string_view s) { return crc32_of(s.data(), s.size()); }

inline std::string hex32(std::uint32_t v) {
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", v);
  return buf;
}

inline bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open " + path.string());
  return bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, const void* data, std::size_t size) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot write " + path.string());
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
  if (!out) throw io_error("write failed for " + path.string());
}

inline void write_file(const std::filesystem::path& path, const bytes& b) { write_file(path, b.data(), b.size()); }
inline void write_file(const std::filesystem::path& path, std::string_view s) { write_file(path, s.data(), s.size()); }

namespace detail {

struct png_buffer_reader {
  const bytes* src;
  std::size_t offset;
};

[[noreturn]] inline void png_fail(png_structp png, png_const_charp msg) {
  auto* message = static_cast<std::string*>(png_get_error_ptr(png));
  if (message) *message = msg;
  std::longjmp(png_jmpbuf(png), 1);
}

inline void png_silent(png_structp, png_const_charp) {}

}  // namespace detail

/// 8-bit RGB, row-major interleaved (H x W x 3). Output bytes are a pure function of the pixels.
inline bytes encode_png_rgb(const std::uint8_t* pixels, std::size_t height, std::size_t width) {
  std::string message;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &message, detail::png_fail, detail::png_silent);
  if (!png) throw io_error("png: cannot allocate writer");
  png_infop info = png_create_info_struct(png);
  bytes out;
  std::vector<png_bytep> rows(height);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw io_error("png encode failed: " + message);
  }
  png_set_write_fn(
      png, &out,
      [](png_structp p, png_bytep data, png_size_t len) {
        auto* dst = static_cast<bytes*>(png_get_io_ptr(p));
        dst->insert(dst->end(), data, data + len);
      },
      nullptr);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_set_compression_level(png, 6);
  for (std::size_t r = 0; r < height; ++r) rows[r] = const_cast<png_bytep>(pixels + r * width * 3);
  png_set_rows(png, info, rows.data());
  png_write_png(png, info, PNG_TRANSFORM_IDENTITY, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

struct rgb_image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;  // H x W x 3
};

inline rgb_image decode_png_rgb(const bytes& data) {
  if (data.size() < 8 || png_sig_cmp(data.data(), 0, 8) != 0) throw format_error("not a PNG stream");
  std::string message;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &message, detail::png_fail, detail::png_silent);
  if (!png) throw io_error("png: cannot allocate reader");
  png_infop info = png_create_info_struct(png);
  detail::png_buffer_reader reader{&data, 0};
  rgb_image img;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw format_error("png decode failed: " + message);
  }
  png_set_read_fn(png, &reader, [](png_structp p, png_bytep out, png_size_t len) {
    auto* r = static_cast<detail::png_buffer_reader*>(png_get_io_ptr(p));
    if (r->offset + len > r->src->size()) png_error(p, "truncated PNG stream");
    std::memcpy(out, r->src->data() + r->offset, len);
    r->offset += len;
  });
  png_read_info(png, info);
  if (png_get_bit_depth(png, info) != 8 || png_get_color_type(png, info) != PNG_COLOR_TYPE_RGB) {
    png_error(png, "expected 8-bit RGB");
  }
  img.width = png_get_image_width(png, info);
  img.height = png_get_image_height(png, info);
  img.pixels.resize(img.width * img.height * 3);
  rows.resize(img.height);
  for (std::size_t r = 0; r < img.height; ++r) rows[r] = img.pixels.data() + r * img.width * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

}  // namespace prednet::io
