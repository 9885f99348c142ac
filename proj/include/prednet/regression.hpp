// Copyright (c) 2026, prednet authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "prednet/errors.hpp"

/**
 * Least-squares series fits on [-1, 1] and coefficient-perturbation locality.
 *
 * Every model of order N has 2N + 1 coefficients. Polynomial kinds use
 * degrees 0..2N. The Fourier kind is laid out as
 *
 *     index 0      -> 1/2            (the a_0 / 2 constant term)
 *     index 2n - 1 -> cos(pi n x)    (a_n)
 *     index 2n     -> sin(pi n x)    (b_n)
 */
namespace prednet::regression {

enum class basis_kind { naive, legendre, fourier };

inline std::string to_string(basis_kind k) {
  switch (k) {
    case basis_kind::naive: return "naive";
    case basis_kind::legendre: return "legendre";
    case basis_kind::fourier: return "fourier";
  }
  return "unknown";
}

inline basis_kind parse_basis(const std::string& s) {
  if (s == "naive") return basis_kind::naive;
  if (s == "legendre") return basis_kind::legendre;
  if (s == "fourier") return basis_kind::fourier;
  throw argument_error("unknown basis '" + s + "' (expected naive, legendre or fourier)");
}

inline std::size_t coefficient_count(std::size_t order) { return 2 * order + 1; }

/// Legendre P_n by the three-term recurrence (n+1) P_{n+1} = (2n+1) x P_n - n P_{n-1}.
inline double legendre(int n, double x) {
  if (n == 0) return 1.0;
  double prev = 1.0, cur = x;
  for (int k = 1; k < n; ++k) {
    const double next = ((2.0 * k + 1.0) * x * cur - k * prev) / (k + 1.0);
    prev = cur;
    cur = next;
  }
  return cur;
}

inline double eval_basis(basis_kind kind, int index, double x) {
  if (index < 0 || index > 4096) throw argument_error("basis index " + std::to_string(index) + " is invalid");
  if (!(std::abs(x) <= 1.0)) throw argument_error("basis functions are defined on [-1, 1]");
  switch (kind) {
    case basis_kind::naive: return std::pow(x, index);
    case basis_kind::legendre: return legendre(index, x);
    case basis_kind::fourier: {
      if (index == 0) return 0.5;
      const int n = (index + 1) / 2;
      const double arg = std::numbers::pi * n * x;
      return index % 2 == 1 ? std::cos(arg) : std::sin(arg);
    }
  }
  throw argument_error("unknown basis kind");
}

/// Human-readable name of a coefficient, e.g. "a_2", "b_1", "a_0".
inline std::string coefficient_name(basis_kind kind, std::size_t index) {
  if (kind != basis_kind::fourier || index == 0) return "a_" + std::to_string(index);
  const std::size_t n = (index + 1) / 2;
  return (index % 2 == 1 ? "a_" : "b_") + std::to_string(n);
}

struct series_model {
  basis_kind kind = basis_kind::naive;
  std::size_t order = 0;
  std::vector<double> coefficients;

  double operator()(double x) const {
    double acc = 0.0;
    for (std::size_t i = 0; i < coefficients.size(); ++i) acc += coefficients[i] * eval_basis(kind, static_cast<int>(i), x);
    return acc;
  }
};

/// Cell-centred uniform grid on [-1, 1]: x_j = -1 + (j + 1/2) * 2 / points.
/// It is symmetric and covers one full period of every Fourier basis function evenly.
inline std::vector<double> uniform_grid(std::size_t points = 2001) {
  if (points < 2) throw argument_error("grid needs at least two points");
  std::vector<double> xs(points);
  const double h = 2.0 / static_cast<double>(points);
  for (std::size_t j = 0; j < points; ++j) xs[j] = -1.0 + (static_cast<double>(j) + 0.5) * h;
  return xs;
}

inline Eigen::MatrixXd design_matrix(basis_kind kind, std::size_t order, const std::vector<double>& xs) {
  const std::size_t p = coefficient_count(order);
  Eigen::MatrixXd a(static_cast<long>(xs.size()), static_cast<long>(p));
  for (std::size_t i = 0; i < xs.size(); ++i)
    for (std::size_t j = 0; j < p; ++j) a(static_cast<long>(i), static_cast<long>(j)) = eval_basis(kind, static_cast<int>(j), xs[i]);
  return a;
}

namespace detail {

/// Column-pivoted QR least squares; reports the columns outside the numerical rank.
inline Eigen::VectorXd solve_least_squares(const Eigen::MatrixXd& a, const Eigen::VectorXd& y,
                                           const std::vector<std::size_t>& column_ids) {
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(a);
  qr.setThreshold(1e-10);
  if (qr.rank() < a.cols()) {
    std::vector<std::size_t> degenerate;
    for (long i = qr.rank(); i < a.cols(); ++i) degenerate.push_back(column_ids[static_cast<std::size_t>(qr.colsPermutation().indices()(i))]);
    std::sort(degenerate.begin(), degenerate.end());
    std::string list;
    for (auto c : degenerate) list += (list.empty() ? "" : ", ") + std::to_string(c);
    throw rank_deficient_error("design matrix is rank deficient; degenerate basis columns: " + list, degenerate);
  }
  return qr.solve(y);
}

inline void check_samples(std::size_t order, const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size()) throw dimension_error("x and y sample counts differ");
  if (xs.size() < coefficient_count(order)) {
    throw argument_error("need at least " + std::to_string(coefficient_count(order)) + " samples for order " +
                         std::to_string(order));
  }
  for (double x : xs)
    if (!(std::abs(x) <= 1.0)) throw argument_error("samples must lie in [-1, 1]");
}

}  // namespace detail

inline series_model fit_least_squares(basis_kind kind, std::size_t order, const std::vector<double>& xs,
                                      const std::vector<double>& ys) {
  detail::check_samples(order, xs, ys);
  const auto a = design_matrix(kind, order, xs);
  const Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(ys.data(), static_cast<long>(ys.size()));
  std::vector<std::size_t> ids(coefficient_count(order));
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  const Eigen::VectorXd c = detail::solve_least_squares(a, y, ids);
  return {kind, order, std::vector<double>(c.data(), c.data() + c.size())};
}

/// Least squares with coefficient `index` held at `value`; every other coefficient is refit.
inline series_model fit_with_frozen(basis_kind kind, std::size_t order, const std::vector<double>& xs,
                                    const std::vector<double>& ys, std::size_t index, double value) {
  detail::check_samples(order, xs, ys);
  const std::size_t p = coefficient_count(order);
  if (index >= p) throw argument_error("coefficient index out of range");
  const auto a = design_matrix(kind, order, xs);
  Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(ys.data(), static_cast<long>(ys.size()));
  y -= value * a.col(static_cast<long>(index));
  Eigen::MatrixXd rest(a.rows(), static_cast<long>(p - 1));
  std::vector<std::size_t> ids;
  for (std::size_t j = 0, k = 0; j < p; ++j) {
    if (j == index) continue;
    rest.col(static_cast<long>(k++)) = a.col(static_cast<long>(j));
    ids.push_back(j);
  }
  const Eigen::VectorXd c = detail::solve_least_squares(rest, y, ids);
  series_model m{kind, order, std::vector<double>(p)};
  for (std::size_t k = 0; k < ids.size(); ++k) m.coefficients[ids[k]] = c(static_cast<long>(k));
  m.coefficients[index] = value;
  return m;
}

inline series_model perturb_coefficient(const series_model& model, std::size_t index, double delta) {
  if (index >= model.coefficients.size()) throw argument_error("coefficient index out of range");
  series_model out = model;
  out.coefficients[index] += delta;
  return out;
}

/// Riemann estimate of the integral over [-1, 1] of (f - g)^2 on a cell-centred grid.
inline double l2_squared_difference(const series_model& f, const series_model& g, std::size_t points = 2001) {
  const auto xs = uniform_grid(points);
  const double h = 2.0 / static_cast<double>(points);
  double acc = 0.0;
  for (double x : xs) {
    const double d = f(x) - g(x);
    acc += d * d;
  }
  return acc * h;
}

struct locality_result {
  basis_kind kind = basis_kind::naive;
  std::size_t order = 0;
  std::size_t index = 0;
  double delta = 0.0;
  series_model fitted;
  series_model refit;
  double max_other_change = 0.0;  // max |refit_j - fitted_j| over j != index
  double l2_squared_change = 0.0;  // integral of (refit - fitted)^2
};

/// Fit, freeze coefficient `index` at fitted + delta, refit the rest, and measure how far the rest moved.
inline locality_result locality_report(basis_kind kind, std::size_t order, const std::vector<double>& xs,
                                       const std::vector<double>& ys, std::size_t index, double delta) {
  locality_result r;
  r.kind = kind;
  r.order = order;
  r.index = index;
  r.delta = delta;
  r.fitted = fit_least_squares(kind, order, xs, ys);
  if (index >= r.fitted.coefficients.size()) throw argument_error("coefficient index out of range");
  r.refit = fit_with_frozen(kind, order, xs, ys, index, r.fitted.coefficients[index] + delta);
  for (std::size_t j = 0; j < r.fitted.coefficients.size(); ++j) {
    if (j != index) r.max_other_change = std::max(r.max_other_change, std::abs(r.refit.coefficients[j] - r.fitted.coefficients[j]));
  }
  r.l2_squared_change = l2_squared_difference(r.refit, r.fitted, xs.size());
  return r;
}

/// Target used by the demo: smooth, non-periodic and not a low-degree polynomial.
inline double demo_target(double x) { return std::exp(0.8 * x) * std::cos(2.5 * x) + 0.3 * x; }

struct demo_protocol {
  std::size_t order = 3;
  double delta = 0.1;
  std::size_t index = 2;
  std::size_t points = 2001;
};

inline std::vector<locality_result> run_demo(const std::vector<basis_kind>& kinds, const demo_protocol& p) {
  const auto xs = uniform_grid(p.points);
  std::vector<double> ys(xs.size());
  std::transform(xs.begin(), xs.end(), ys.begin(), demo_target);
  std::vector<locality_result> out;
  for (auto k : kinds) out.push_back(locality_report(k, p.order, xs, ys, p.index, p.delta));
  return out;
}

/// Normalized empirical Gram matrix |G_ij| / sqrt(G_ii G_jj) on the grid; the max off-diagonal entry.
inline double gram_max_off_diagonal_ratio(basis_kind kind, std::size_t order, std::size_t points = 2001) {
  const auto a = design_matrix(kind, order, uniform_grid(points));
  const Eigen::MatrixXd g = a.transpose() * a;
  double worst = 0.0;
  for (long i = 0; i < g.rows(); ++i)
    for (long j = 0; j < g.cols(); ++j)
      if (i != j) worst = std::max(worst, std::abs(g(i, j)) / std::sqrt(g(i, i) * g(j, j)));
  return worst;
}

inline std::string locality_csv(const std::vector<locality_result>& results) {
  std::ostringstream out;
  out.precision(12);
  out << "basis,order,index,coefficient,delta,max_other_change,l2_squared_change,gram_max_off_diagonal\n";
  for (const auto& r : results) {
    out << to_string(r.kind) << ',' << r.order << ',' << r.index << ',' << coefficient_name(r.kind, r.index) << ','
        << r.delta << ',' << r.max_other_change << ',' << r.l2_squared_change << ','
        << gram_max_off_diagonal_ratio(r.kind, r.order) << '\n';
  }
  return out.str();
}

/// Columns: x, original fit, perturbed (frozen + refit) fit. Whitespace separated for gnuplot.
inline std::string curve_dat(const locality_result& r, std::size_t points = 401) {
  std::ostringstream out;
  out.precision(10);
  out << "# " << to_string(r.kind) << " order " << r.order << ", " << coefficient_name(r.kind, r.index)
      << " shifted by " << r.delta << "\n# x fitted perturbed\n";
  for (std::size_t i = 0; i < points; ++i) {
    const double x = -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(points - 1);
    out << x << ' ' << r.fitted(x) << ' ' << r.refit(x) << '\n';
  }
  return out.str();
}

}  // namespace prednet::regression
