// SPDX-License-Identifier: Apache-2.0
//
// Shared helpers for the test suites: random inputs, independent oracles
// (triple-loop products, finite differences, Eigen-based SVD), and small
// utilities. Everything here is deliberately separate from the library's
// implementation paths.
#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include <Eigen/Dense>

#include "ermoe/linalg.hpp"
#include "ermoe/rng.hpp"
#include "ermoe/tensor.hpp"

namespace testsupport {

using ermoe::Rng;
using ermoe::Shape;
using ermoe::Tensor;

inline Tensor random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
  return rng.normal_tensor(std::move(shape), scale);
}

inline Tensor random_orthonormal(Rng& rng, std::size_t d) {
  return ermoe::qr_orthonormalize(rng.normal_tensor(Shape{d, d}));
}

/// Scalar triple-loop product, written independently of ermoe::matmul.
inline Tensor matmul_oracle(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a.at2(i, p) * b.at2(p, j);
      c.at2(i, j) = acc;
    }
  return c;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a.at(i) - b.at(i)));
  return m;
}

/// Central finite differences of a scalar function of one flat tensor.
inline Tensor finite_difference(std::function<double(const Tensor&)> f, Tensor x,
                                double h = 1e-6) {
  Tensor g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x.at(i);
    x.at(i) = orig + h;
    const double fp = f(x);
    x.at(i) = orig - h;
    const double fm = f(x);
    x.at(i) = orig;
    g.at(i) = (fp - fm) / (2.0 * h);
  }
  return g;
}

/// Relative error with a small-denominator floor, shared convention with the
/// library's gradcheck.
inline double rel_err(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double max_rel_err(const Tensor& a, const Tensor& b, double floor = 1e-6) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, rel_err(a.at(i), b.at(i), floor));
  return m;
}

inline Eigen::MatrixXd to_eigen(const Tensor& t) {
  Eigen::MatrixXd m(t.dim(0), t.dim(1));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = t.at2(i, j);
  return m;
}

/// Singular values via Eigen's Jacobi SVD, descending.
inline std::vector<double> singular_values_oracle(const Tensor& t) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(to_eigen(t));
  std::vector<double> out;
  for (Eigen::Index i = 0; i < svd.singularValues().size(); ++i)
    out.push_back(svd.singularValues()(i));
  return out;
}

/// Cosines of principal angles between the column spaces of two orthonormal
/// bases: singular values of A^T B.
inline std::vector<double> principal_angle_cosines(const Tensor& a, const Tensor& b) {
  Eigen::MatrixXd prod = to_eigen(a).transpose() * to_eigen(b);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(prod);
  std::vector<double> out;
  for (Eigen::Index i = 0; i < svd.singularValues().size(); ++i)
    out.push_back(svd.singularValues()(i));
  return out;
}

}  // namespace testsupport
