// Copyright (c) 2026, prednet authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "prednet/tensor.hpp"

/// Raw forward/backward kernels. No tape bookkeeping lives here; tape.hpp
/// wires these into differentiable operations.
namespace prednet::kernels {

template <typename T>
using row_matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using matrix_map = Eigen::Map<row_matrix<T>>;
template <typename T>
using const_matrix_map = Eigen::Map<const row_matrix<T>>;

struct conv_geometry {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t dilation = 1;
};

struct conv_dims {
  std::size_t n, c_in, h, w;
  std::size_t c_out, k;
  std::size_t out_h, out_w;

  std::size_t patch() const { return c_in * k * k; }
  std::size_t out_plane() const { return out_h * out_w; }
  bool pointwise(const conv_geometry& g) const { return k == 1 && g.stride == 1 && g.padding == 0; }
};

template <typename T>
conv_dims conv_shape(const basic_tensor<T>& input, const basic_tensor<T>& weight, const basic_tensor<T>& bias,
                     const conv_geometry& g) {
  require_rank(input, 4, "conv2d input");
  require_rank(weight, 4, "conv2d weight");
  if (weight.dim(2) != weight.dim(3)) throw dimension_error("conv2d: kernel must be square");
  if (weight.dim(1) != input.dim(1)) {
    throw dimension_error("conv2d: input has " + std::to_string(input.dim(1)) + " channels, weight expects " +
                          std::to_string(weight.dim(1)));
  }
  if (bias.size() != weight.dim(0)) throw dimension_error("conv2d: bias length must equal output channels");
  if (g.stride == 0 || g.dilation == 0) throw argument_error("conv2d: stride and dilation must be positive");
  conv_dims d{};
  d.n = input.dim(0);
  d.c_in = input.dim(1);
  d.h = input.dim(2);
  d.w = input.dim(3);
  d.c_out = weight.dim(0);
  d.k = weight.dim(2);
  const auto span = static_cast<long>(g.dilation * (d.k - 1) + 1);
  const long oh = (static_cast<long>(d.h + 2 * g.padding) - span) / static_cast<long>(g.stride) + 1;
  const long ow = (static_cast<long>(d.w + 2 * g.padding) - span) / static_cast<long>(g.stride) + 1;
  if (static_cast<long>(d.h + 2 * g.padding) < span || static_cast<long>(d.w + 2 * g.padding) < span || oh <= 0 ||
      ow <= 0) {
    throw dimension_error("conv2d: output spatial dims would not be positive");
  }
  d.out_h = static_cast<std::size_t>(oh);
  d.out_w = static_cast<std::size_t>(ow);
  return d;
}

// Column buffer layout: row = (ci * k + ki) * k + kj, column = oh * out_w + ow.
template <typename T>
void im2col(const T* image, const conv_dims& d, const conv_geometry& g, T* col) {
  const long pad = static_cast<long>(g.padding);
  for (std::size_t ci = 0; ci < d.c_in; ++ci) {
    const T* plane = image + ci * d.h * d.w;
    for (std::size_t ki = 0; ki < d.k; ++ki) {
      for (std::size_t kj = 0; kj < d.k; ++kj) {
        T* row = col + ((ci * d.k + ki) * d.k + kj) * d.out_plane();
        for (std::size_t oh = 0; oh < d.out_h; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + ki * g.dilation) - pad;
          T* dst = row + oh * d.out_w;
          if (ih < 0 || ih >= static_cast<long>(d.h)) {
            std::fill(dst, dst + d.out_w, T{0});
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(ih) * d.w;
          for (std::size_t ow = 0; ow < d.out_w; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + kj * g.dilation) - pad;
            dst[ow] = (iw < 0 || iw >= static_cast<long>(d.w)) ? T{0} : src[iw];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const conv_dims& d, const conv_geometry& g, T* image) {
  const long pad = static_cast<long>(g.padding);
  for (std::size_t ci = 0; ci < d.c_in; ++ci) {
    T* plane = image + ci * d.h * d.w;
    for (std::size_t ki = 0; ki < d.k; ++ki) {
      for (std::size_t kj = 0; kj < d.k; ++kj) {
        const T* row = col + ((ci * d.k + ki) * d.k + kj) * d.out_plane();
        for (std::size_t oh = 0; oh < d.out_h; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + ki * g.dilation) - pad;
          if (ih < 0 || ih >= static_cast<long>(d.h)) continue;
          T* dst = plane + static_cast<std::size_t>(ih) * d.w;
          const T* src = row + oh * d.out_w;
          for (std::size_t ow = 0; ow < d.out_w; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + kj * g.dilation) - pad;
            if (iw >= 0 && iw < static_cast<long>(d.w)) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

/// Dilated cross-correlation with zero padding, NCHW input and OIKK weights.
template <typename T>
basic_tensor<T> conv2d_forward(const basic_tensor<T>& input, const basic_tensor<T>& weight,
                               const basic_tensor<T>& bias, const conv_geometry& g) {
  const conv_dims d = conv_shape(input, weight, bias, g);
  basic_tensor<T> out({d.n, d.c_out, d.out_h, d.out_w});
  const bool direct = d.pointwise(g);
  std::vector<T> col(direct ? 0 : d.patch() * d.out_plane());
  const_matrix_map<T> w(weight.raw(), static_cast<long>(d.c_out), static_cast<long>(d.patch()));
  for (std::size_t n = 0; n < d.n; ++n) {
    const T* image = input.raw() + n * d.c_in * d.h * d.w;
    const T* col_ptr = image;
    if (!direct) {
      im2col(image, d, g, col.data());
      col_ptr = col.data();
    }
    const_matrix_map<T> cols(col_ptr, static_cast<long>(d.patch()), static_cast<long>(d.out_plane()));
    matrix_map<T> y(out.raw() + n * d.c_out * d.out_plane(), static_cast<long>(d.c_out),
                    static_cast<long>(d.out_plane()));
    y.noalias() = w * cols;
    for (std::size_t o = 0; o < d.c_out; ++o) y.row(static_cast<long>(o)).array() += bias[o];
  }
  return out;
}

/// Accumulates gradients into whichever of grad_input/grad_weight/grad_bias is non-null.
template <typename T>
void conv2d_backward(const basic_tensor<T>& input, const basic_tensor<T>& weight, const basic_tensor<T>& bias,
                     const conv_geometry& g, std::span<const T> grad_out, T* grad_input, T* grad_weight,
                     T* grad_bias) {
  const conv_dims d = conv_shape(input, weight, bias, g);
  const bool direct = d.pointwise(g);
  std::vector<T> col(direct ? 0 : d.patch() * d.out_plane());
  std::vector<T> dcol(grad_input && !direct ? d.patch() * d.out_plane() : 0);
  const_matrix_map<T> w(weight.raw(), static_cast<long>(d.c_out), static_cast<long>(d.patch()));
  for (std::size_t n = 0; n < d.n; ++n) {
    const_matrix_map<T> dy(grad_out.data() + n * d.c_out * d.out_plane(), static_cast<long>(d.c_out),
                           static_cast<long>(d.out_plane()));
    if (grad_bias) {
      // Plain loop: Eigen's vectorized reductions peel by address alignment, which would make
      // the summation order (and so the result) depend on where the allocator put the buffer.
      const T* rows = grad_out.data() + n * d.c_out * d.out_plane();
      for (std::size_t o = 0; o < d.c_out; ++o) {
        T acc{0};
        for (std::size_t p = 0; p < d.out_plane(); ++p) acc += rows[o * d.out_plane() + p];
        grad_bias[o] += acc;
      }
    }
    const T* image = input.raw() + n * d.c_in * d.h * d.w;
    if (grad_weight) {
      const T* col_ptr = image;
      if (!direct) {
        im2col(image, d, g, col.data());
        col_ptr = col.data();
      }
      const_matrix_map<T> cols(col_ptr, static_cast<long>(d.patch()), static_cast<long>(d.out_plane()));
      matrix_map<T> dw(grad_weight, static_cast<long>(d.c_out), static_cast<long>(d.patch()));
      dw.noalias() += dy * cols.transpose();
    }
    if (grad_input) {
      T* dx = grad_input + n * d.c_in * d.h * d.w;
      if (direct) {
        matrix_map<T> dxm(dx, static_cast<long>(d.c_in), static_cast<long>(d.out_plane()));
        dxm.noalias() += w.transpose() * dy;
      } else {
        matrix_map<T> dc(dcol.data(), static_cast<long>(d.patch()), static_cast<long>(d.out_plane()));
        dc.noalias() = w.transpose() * dy;
        col2im_add(dcol.data(), d, g, dx);
      }
    }
  }
}

template <typename T>
struct batch_norm_state {
  std::vector<T> running_mean;
  std::vector<T> running_var;

  batch_norm_state() = default;
  explicit batch_norm_state(std::size_t channels) : running_mean(channels, T{0}), running_var(channels, T{1}) {}
};

enum class norm_mode { train, eval };

struct batch_norm_options {
  double eps = 1e-5;
  double momentum = 0.1;
};

/// Per-channel quantities saved by the forward pass for the backward pass.
template <typename T>
struct batch_norm_saved {
  std::vector<T> inv_std;
  basic_tensor<T> normalized;
};

template <typename T>
basic_tensor<T> batch_norm_forward(const basic_tensor<T>& x, std::span<const T> gamma, std::span<const T> beta,
                                   batch_norm_state<T>& state, norm_mode mode, const batch_norm_options& opt,
                                   batch_norm_saved<T>* saved) {
  if (x.rank() < 2) throw dimension_error("batch_norm: input needs a channel dimension");
  const std::size_t n = x.dim(0), c = x.dim(1);
  const std::size_t plane = x.size() / (n * c);
  if (gamma.size() != c || beta.size() != c) throw dimension_error("batch_norm: gamma/beta length != channels");
  if (state.running_mean.size() != c || state.running_var.size() != c) {
    throw dimension_error("batch_norm: running stats length != channels");
  }
  const std::size_t count = n * plane;
  if (mode == norm_mode::train && count == 0) throw argument_error("batch_norm: empty batch in train mode");

  basic_tensor<T> y(x.shape());
  basic_tensor<T> xhat(x.shape());
  std::vector<T> inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mean = 0, var = 0;
    if (mode == norm_mode::train) {
      for (std::size_t i = 0; i < n; ++i) {
        const T* p = x.raw() + (i * c + ch) * plane;
        for (std::size_t j = 0; j < plane; ++j) mean += p[j];
      }
      mean /= static_cast<double>(count);
      for (std::size_t i = 0; i < n; ++i) {
        const T* p = x.raw() + (i * c + ch) * plane;
        for (std::size_t j = 0; j < plane; ++j) {
          const double dlt = p[j] - mean;
          var += dlt * dlt;
        }
      }
      const double biased = var / static_cast<double>(count);
      const double unbiased = count > 1 ? var / static_cast<double>(count - 1) : biased;
      state.running_mean[ch] =
          static_cast<T>((1.0 - opt.momentum) * state.running_mean[ch] + opt.momentum * mean);
      state.running_var[ch] = static_cast<T>((1.0 - opt.momentum) * state.running_var[ch] + opt.momentum * unbiased);
      var = biased;
    } else {
      mean = state.running_mean[ch];
      var = state.running_var[ch];
    }
    const T is = static_cast<T>(1.0 / std::sqrt(var + opt.eps));
    const T m = static_cast<T>(mean);
    inv_std[ch] = is;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t off = (i * c + ch) * plane;
      for (std::size_t j = 0; j < plane; ++j) {
        const T nx = (x[off + j] - m) * is;
        xhat[off + j] = nx;
        y[off + j] = gamma[ch] * nx + beta[ch];
      }
    }
  }
  if (saved) {
    saved->inv_std = std::move(inv_std);
    saved->normalized = std::move(xhat);
  }
  return y;
}

template <typename T>
void batch_norm_backward(const batch_norm_saved<T>& saved, std::span<const T> gamma, norm_mode mode,
                         std::span<const T> grad_out, T* grad_input, T* grad_gamma, T* grad_beta) {
  const auto& xhat = saved.normalized;
  const std::size_t n = xhat.dim(0), c = xhat.dim(1);
  const std::size_t plane = xhat.size() / (n * c);
  const double count = static_cast<double>(n * plane);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum_dy = 0, sum_dy_xhat = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t off = (i * c + ch) * plane;
      for (std::size_t j = 0; j < plane; ++j) {
        sum_dy += grad_out[off + j];
        sum_dy_xhat += static_cast<double>(grad_out[off + j]) * xhat[off + j];
      }
    }
    if (grad_gamma) grad_gamma[ch] += static_cast<T>(sum_dy_xhat);
    if (grad_beta) grad_beta[ch] += static_cast<T>(sum_dy);
    if (!grad_input) continue;
    const T scale = gamma[ch] * saved.inv_std[ch];
    if (mode == norm_mode::eval) {
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t off = (i * c + ch) * plane;
        for (std::size_t j = 0; j < plane; ++j) grad_input[off + j] += scale * grad_out[off + j];
      }
      continue;
    }
    const T mean_dy = static_cast<T>(sum_dy / count);
    const T mean_dy_xhat = static_cast<T>(sum_dy_xhat / count);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t off = (i * c + ch) * plane;
      for (std::size_t j = 0; j < plane; ++j) {
        grad_input[off + j] += scale * (grad_out[off + j] - mean_dy - xhat[off + j] * mean_dy_xhat);
      }
    }
  }
}

template <typename T>
T sigmoid(T x) {
  // Split by sign so exp never overflows.
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

}  // namespace prednet::kernels
