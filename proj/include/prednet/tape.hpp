// Copyright (c) 2026, prednet authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "prednet/kernels.hpp"
#include "prednet/tensor.hpp"

namespace prednet {

/// Handle to a node recorded on a tape.
struct var {
  static constexpr std::uint32_t invalid = std::numeric_limits<std::uint32_t>::max();
  std::uint32_t id = invalid;

  bool valid() const noexcept { return id != invalid; }
  friend bool operator==(var, var) = default;
};

/// Parameters of the mask tone curve: emphasis exponent n and suppression bias beta.
struct mask_transform_params {
  double n = 1.0;
  double beta = 0.0;
  bool clamp = true;

  bool is_identity() const noexcept { return n == 1.0 && beta == 0.0; }
};

namespace detail {

template <typename T>
T tone_curve(T m, double n) {
  const double x = m;
  if (x < 0.5) return static_cast<T>(std::pow(x / 0.5, n) / 2.0);
  return static_cast<T>(1.0 - std::pow((1.0 - x) / 0.5, n) / 2.0);
}

template <typename T>
T tone_curve_derivative(T m, double n) {
  const double x = m;
  if (x < 0.5) return static_cast<T>(n * std::pow(x / 0.5, n - 1.0));
  return static_cast<T>(n * std::pow((1.0 - x) / 0.5, n - 1.0));
}

}  // namespace detail

/**
 * Reverse-mode differentiation tape.
 *
 * Every operation appends its output node and, when gradients are needed, a
 * backward closure. backward() replays the closures in exact reverse recording
 * order. A tape may be differentiated once; call reset() to reuse it.
 *
 * With recording disabled the tape is a plain forward evaluator: no closures
 * are stored and backward() throws.
 */
template <typename T>
class basic_tape {
 public:
  explicit basic_tape(bool recording = true) : recording_(recording) {}
  basic_tape(const basic_tape&) = delete;
  basic_tape& operator=(const basic_tape&) = delete;

  bool recording() const noexcept { return recording_; }
  void set_checked(bool on) noexcept { checked_ = on; }
  bool checked() const noexcept { return checked_; }
  std::size_t node_count() const noexcept { return nodes_.size(); }
  std::size_t op_count() const noexcept { return ops_.size(); }

  void reset() {
    nodes_.clear();
    ops_.clear();
    backward_done_ = false;
    visit_log_.clear();
  }

  var constant(basic_tensor<T> value) { return push(std::move(value), false, "constant"); }
  var parameter(basic_tensor<T> value) { return push(std::move(value), recording_, "parameter"); }

  const basic_tensor<T>& value(var v) const { return node_at(v).value; }
  bool requires_grad(var v) const { return node_at(v).requires_grad; }

  /// Gradient of the last backward() output with respect to v (zeros when nothing flowed).
  basic_tensor<T> grad(var v) const {
    const node& n = node_at(v);
    if (!n.requires_grad) throw tape_error("grad requested for a node that does not require gradients");
    if (n.grad.empty()) return basic_tensor<T>::zeros(n.value.shape());
    return basic_tensor<T>(n.value.shape(), n.grad);
  }

  /// Output node ids of the backward closures in the order backward() ran them.
  const std::vector<std::uint32_t>& backward_visit_order() const noexcept { return visit_log_; }

  void backward(var output) {
    if (!recording_) throw tape_error("backward on a tape with recording disabled");
    if (backward_done_) throw tape_error("backward called twice without reset");
    node& out = node_at(output);
    if (out.value.size() != 1) {
      throw tape_error("backward requires a scalar output, got shape " + to_string(out.value.shape()));
    }
    if (!out.requires_grad) throw tape_error("backward output does not depend on any parameter");
    backward_done_ = true;
    out.grad.assign(1, T{1});
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
      if (node_at(it->output).grad.empty()) continue;
      visit_log_.push_back(it->output.id);
      (*it)(*this);
    }
  }

  // ---- operations -------------------------------------------------------

  var conv2d(var x, var w, var b, kernels::conv_geometry geom) {
    auto out = kernels::conv2d_forward(value(x), value(w), value(b), geom);
    return record("conv2d", std::move(out), {x, w, b}, [x, w, b, geom](basic_tape& t, var y) {
      kernels::conv2d_backward(t.value(x), t.value(w), t.value(b), geom, t.out_grad(y), t.grad_ptr(x),
                               t.grad_ptr(w), t.grad_ptr(b));
    });
  }

  var batch_norm(var x, var gamma, var beta, kernels::batch_norm_state<T>& state, kernels::norm_mode mode,
                 kernels::batch_norm_options opt = {}) {
    auto saved = std::make_shared<kernels::batch_norm_saved<T>>();
    auto out = kernels::batch_norm_forward(value(x), value(gamma).data(), value(beta).data(), state, mode, opt,
                                           saved.get());
    return record("batch_norm", std::move(out), {x, gamma, beta}, [x, gamma, beta, saved, mode](basic_tape& t, var y) {
      kernels::batch_norm_backward(*saved, t.value(gamma).data(), mode, t.out_grad(y), t.grad_ptr(x),
                                   t.grad_ptr(gamma), t.grad_ptr(beta));
    });
  }

  var leaky_relu(var x, T slope) {
    const auto& in = value(x);
    basic_tensor<T> out(in.shape());
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] >= T{0} ? in[i] : slope * in[i];
    return record("leaky_relu", std::move(out), {x}, [x, slope](basic_tape& t, var y) {
      T* gx = t.grad_ptr(x);
      if (!gx) return;
      const auto& in = t.value(x);
      auto gy = t.out_grad(y);
      for (std::size_t i = 0; i < in.size(); ++i) gx[i] += in[i] >= T{0} ? gy[i] : slope * gy[i];
    });
  }

  var sigmoid(var x) {
    const auto& in = value(x);
    basic_tensor<T> out(in.shape());
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = kernels::sigmoid(in[i]);
    return record("sigmoid", std::move(out), {x}, [x](basic_tape& t, var y) {
      T* gx = t.grad_ptr(x);
      if (!gx) return;
      const auto& s = t.value(y);
      auto gy = t.out_grad(y);
      for (std::size_t i = 0; i < s.size(); ++i) gx[i] += gy[i] * s[i] * (T{1} - s[i]);
    });
  }

  /// NCHW -> NC spatial mean.
  var global_average_pool(var x) {
    const auto& in = value(x);
    require_rank(in, 4, "global_average_pool");
    const std::size_t nc = in.dim(0) * in.dim(1), plane = in.dim(2) * in.dim(3);
    basic_tensor<T> out({in.dim(0), in.dim(1)});
    for (std::size_t i = 0; i < nc; ++i) {
      T acc{0};
      const T* p = in.raw() + i * plane;
      for (std::size_t j = 0; j < plane; ++j) acc += p[j];
      out[i] = acc / static_cast<T>(plane);
    }
    return record("global_average_pool", std::move(out), {x}, [x, nc, plane](basic_tape& t, var y) {
      T* gx = t.grad_ptr(x);
      if (!gx) return;
      auto gy = t.out_grad(y);
      for (std::size_t i = 0; i < nc; ++i) {
        const T g = gy[i] / static_cast<T>(plane);
        for (std::size_t j = 0; j < plane; ++j) gx[i * plane + j] += g;
      }
    });
  }

  /// Hadamard product of equally shaped tensors.
  var mul(var a, var b) {
    const auto& va = value(a);
    const auto& vb = value(b);
    require_same_shape(va, vb, "elementwise_multiply");
    basic_tensor<T> out(va.shape());
    for (std::size_t i = 0; i < va.size(); ++i) out[i] = va[i] * vb[i];
    return record("mul", std::move(out), {a, b}, [a, b](basic_tape& t, var y) {
      auto gy = t.out_grad(y);
      if (T* ga = t.grad_ptr(a)) {
        const auto& vb = t.value(b);
        for (std::size_t i = 0; i < vb.size(); ++i) ga[i] += gy[i] * vb[i];
      }
      if (T* gb = t.grad_ptr(b)) {
        const auto& va = t.value(a);
        for (std::size_t i = 0; i < va.size(); ++i) gb[i] += gy[i] * va[i];
      }
    });
  }

  var add(var a, var b) {
    const auto& va = value(a);
    const auto& vb = value(b);
    require_same_shape(va, vb, "add");
    basic_tensor<T> out(va.shape());
    for (std::size_t i = 0; i < va.size(); ++i) out[i] = va[i] + vb[i];
    return record("add", std::move(out), {a, b}, [a, b](basic_tape& t, var y) {
      auto gy = t.out_grad(y);
      for (var in : {a, b}) {
        if (T* g = t.grad_ptr(in)) {
          for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i];
        }
      }
    });
  }

  var scale(var a, T factor) {
    const auto& va = value(a);
    basic_tensor<T> out(va.shape());
    for (std::size_t i = 0; i < va.size(); ++i) out[i] = va[i] * factor;
    return record("scale", std::move(out), {a}, [a, factor](basic_tape& t, var y) {
      if (T* g = t.grad_ptr(a)) {
        auto gy = t.out_grad(y);
        for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i] * factor;
      }
    });
  }

  var sum(var a) {
    const auto& va = value(a);
    T acc{0};
    for (T v : va.data()) acc += v;
    return record("sum", basic_tensor<T>({1}, acc), {a}, [a](basic_tape& t, var y) {
      if (T* g = t.grad_ptr(a)) {
        const T gy = t.out_grad(y)[0];
        const std::size_t n = t.value(a).size();
        for (std::size_t i = 0; i < n; ++i) g[i] += gy;
      }
    });
  }

  /// Sum of absolute values (L1 norm). Subgradient 0 at 0.
  var abs_sum(var a) {
    const auto& va = value(a);
    T acc{0};
    for (T v : va.data()) acc += std::abs(v);
    return record("abs_sum", basic_tensor<T>({1}, acc), {a}, [a](basic_tape& t, var y) {
      if (T* g = t.grad_ptr(a)) {
        const T gy = t.out_grad(y)[0];
        const auto& va = t.value(a);
        for (std::size_t i = 0; i < va.size(); ++i) {
          g[i] += va[i] > T{0} ? gy : (va[i] < T{0} ? -gy : T{0});
        }
      }
    });
  }

  /// Multiplies channel c of an NC... tensor by the constant gate[c].
  var channel_gate(var x, std::vector<T> gate) {
    const auto& in = value(x);
    if (in.rank() < 2 || gate.size() != in.dim(1)) throw dimension_error("channel_gate: gate length != channels");
    const std::size_t n = in.dim(0), c = in.dim(1), plane = in.size() / (n * c);
    basic_tensor<T> out(in.shape());
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t j = 0; j < plane; ++j) {
          const std::size_t k = (i * c + ch) * plane + j;
          out[k] = gate[ch] == T{0} ? T{0} : in[k] * gate[ch];
        }
    return record("channel_gate", std::move(out), {x}, [x, gate = std::move(gate), n, c, plane](basic_tape& t, var y) {
      T* gx = t.grad_ptr(x);
      if (!gx) return;
      auto gy = t.out_grad(y);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t j = 0; j < plane; ++j) {
            const std::size_t k = (i * c + ch) * plane + j;
            gx[k] += gy[k] * gate[ch];
          }
    });
  }

  /// x: N x C, weight: O x C, bias: O  ->  N x O.
  var linear(var x, var w, var b) {
    const auto& vx = value(x);
    const auto& vw = value(w);
    const auto& vb = value(b);
    require_rank(vx, 2, "linear input");
    require_rank(vw, 2, "linear weight");
    if (vw.dim(1) != vx.dim(1) || vb.size() != vw.dim(0)) throw dimension_error("linear: shape mismatch");
    const std::size_t n = vx.dim(0), c = vx.dim(1), o = vw.dim(0);
    basic_tensor<T> out({n, o});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t r = 0; r < o; ++r) {
        T acc = vb[r];
        for (std::size_t j = 0; j < c; ++j) acc += vx[i * c + j] * vw[r * c + j];
        out[i * o + r] = acc;
      }
    return record("linear", std::move(out), {x, w, b}, [x, w, b, n, c, o](basic_tape& t, var y) {
      auto gy = t.out_grad(y);
      const auto& vx = t.value(x);
      const auto& vw = t.value(w);
      T* gx = t.grad_ptr(x);
      T* gw = t.grad_ptr(w);
      T* gb = t.grad_ptr(b);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t r = 0; r < o; ++r) {
          const T g = gy[i * o + r];
          if (gb) gb[r] += g;
          for (std::size_t j = 0; j < c; ++j) {
            if (gx) gx[i * c + j] += g * vw[r * c + j];
            if (gw) gw[r * c + j] += g * vx[i * c + j];
          }
        }
    });
  }

  /// Concatenates N x 1 columns into N x K.
  var concat_columns(const std::vector<var>& columns) {
    if (columns.empty()) throw dimension_error("concat_columns: no inputs");
    const std::size_t n = value(columns.front()).size();
    const std::size_t k = columns.size();
    basic_tensor<T> out({n, k});
    for (std::size_t j = 0; j < k; ++j) {
      const auto& col = value(columns[j]);
      if (col.size() != n) throw dimension_error("concat_columns: column lengths differ");
      for (std::size_t i = 0; i < n; ++i) out[i * k + j] = col[i];
    }
    return record("concat_columns", std::move(out), columns, [columns, n, k](basic_tape& t, var y) {
      auto gy = t.out_grad(y);
      for (std::size_t j = 0; j < k; ++j) {
        if (T* g = t.grad_ptr(columns[j])) {
          for (std::size_t i = 0; i < n; ++i) g[i] += gy[i * k + j];
        }
      }
    });
  }

  /**
   * Mean over samples of the per-sample sum of binary cross entropies:
   * -(1/N) sum_i sum_k [y log p + (1-y) log(1-p)], with p clamped to [eps, 1-eps].
   * Inside the clamp region the derivative is zero.
   */
  var binary_cross_entropy(var predictions, const basic_tensor<T>& labels, double eps = 1e-7) {
    const auto& p = value(predictions);
    require_same_shape(p, labels, "binary_cross_entropy");
    const std::size_t n = p.dim(0);
    double acc = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double q = std::clamp(static_cast<double>(p[i]), eps, 1.0 - eps);
      acc += labels[i] * std::log(q) + (1.0 - labels[i]) * std::log(1.0 - q);
    }
    const T loss = static_cast<T>(-acc / static_cast<double>(n));
    return record("binary_cross_entropy", basic_tensor<T>({1}, loss), {predictions},
                  [predictions, labels, eps, n](basic_tape& t, var y) {
                    T* g = t.grad_ptr(predictions);
                    if (!g) return;
                    const T gy = t.out_grad(y)[0];
                    const auto& p = t.value(predictions);
                    for (std::size_t i = 0; i < p.size(); ++i) {
                      const double q = p[i];
                      if (q < eps || q > 1.0 - eps) continue;
                      const double d = (-labels[i] / q + (1.0 - labels[i]) / (1.0 - q)) / static_cast<double>(n);
                      g[i] += gy * static_cast<T>(d);
                    }
                  });
  }

  /// Elementwise g(M; n, beta) = (1 + beta) h(M; n) - beta, optionally clamped to [0, 1].
  var mask_transform(var m, mask_transform_params params) {
    const auto& in = value(m);
    basic_tensor<T> out(in.shape());
    for (std::size_t i = 0; i < in.size(); ++i) {
      const double v = (1.0 + params.beta) * detail::tone_curve(in[i], params.n) - params.beta;
      out[i] = static_cast<T>(params.clamp ? std::clamp(v, 0.0, 1.0) : v);
    }
    return record("mask_transform", std::move(out), {m}, [m, params](basic_tape& t, var y) {
      T* g = t.grad_ptr(m);
      if (!g) return;
      const auto& in = t.value(m);
      auto gy = t.out_grad(y);
      for (std::size_t i = 0; i < in.size(); ++i) {
        const double v = (1.0 + params.beta) * detail::tone_curve(in[i], params.n) - params.beta;
        if (params.clamp && (v < 0.0 || v > 1.0)) continue;
        g[i] += gy[i] * static_cast<T>((1.0 + params.beta) * detail::tone_curve_derivative(in[i], params.n));
      }
    });
  }

 private:
  struct node {
    basic_tensor<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
  };

  using backward_fn = std::function<void(basic_tape&, var)>;

  struct op_record {
    const char* name;
    var output;
    backward_fn backward;
    void operator()(basic_tape& t) const { backward(t, output); }
  };

  node& node_at(var v) {
    if (v.id >= nodes_.size()) throw tape_error("var does not belong to this tape");
    return nodes_[v.id];
  }
  const node& node_at(var v) const {
    if (v.id >= nodes_.size()) throw tape_error("var does not belong to this tape");
    return nodes_[v.id];
  }

  var push(basic_tensor<T> value, bool requires_grad, const char* name) {
    if (checked_ && !value.all_finite()) throw non_finite_error(std::string(name) + " produced a non-finite value");
    nodes_.push_back(node{std::move(value), {}, requires_grad});
    return var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  var record(const char* name, basic_tensor<T> out, std::initializer_list<var> inputs, backward_fn fn) {
    return record(name, std::move(out), std::vector<var>(inputs), std::move(fn));
  }

  var record(const char* name, basic_tensor<T> out, const std::vector<var>& inputs, backward_fn fn) {
    bool needs = false;
    if (recording_) {
      for (var in : inputs) needs = needs || node_at(in).requires_grad;
    }
    var y = push(std::move(out), needs, name);
    if (needs) {
      ops_.push_back(op_record{name, y, std::move(fn)});
    }
    return y;
  }

  std::span<const T> out_grad(var y) const { return node_at(y).grad; }

  T* grad_ptr(var v) {
    node& n = node_at(v);
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad.assign(n.value.size(), T{0});
    return n.grad.data();
  }

  std::deque<node> nodes_;
  std::vector<op_record> ops_;
  std::vector<std::uint32_t> visit_log_;
  bool recording_ = true;
  bool checked_ = false;
  bool backward_done_ = false;
};

using tape = basic_tape<float>;

}  // namespace prednet
