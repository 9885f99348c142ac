// Copyright (c) 2026, prednet authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace prednet {

/// Tensor shapes do not line up for the requested operation.
class dimension_error : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A scalar argument is outside its documented domain.
class argument_error : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Misuse of the differentiation tape (non-scalar backward, double backward...).
class tape_error : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A value became NaN or infinite while checked mode was on.
class non_finite_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class io_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class checksum_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class version_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or truncated on-disk data.
class format_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training produced a non-finite loss.
class divergence_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Least-squares design matrix without full column rank.
class rank_deficient_error : public std::runtime_error {
 public:
  rank_deficient_error(const std::string& what, std::vector<std::size_t> columns)
      : std::runtime_error(what), columns_(std::move(columns)) {}

  const std::vector<std::size_t>& columns() const noexcept { return columns_; }

 private:
  std::vector<std::size_t> columns_;
};

}  // namespace prednet
