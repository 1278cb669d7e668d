// SPDX-License-Identifier: Apache-2.0
#include "ermoe/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "ermoe/errors.hpp"

namespace ermoe {

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2) throw DimensionError("matmul: left operand must be rank 2");
  const std::size_t m = a.dim(0), k = a.dim(1);
  if (b.rank() == 2) {
    if (b.dim(0) != k) {
      throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                           " vs " + shape_str(b.shape()));
    }
    const std::size_t n = b.dim(1);
    Tensor c(Shape{m, n});
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t p = 0; p < k; ++p) s += a.at2(i, p) * b.at2(p, j);
        c.at2(i, j) = s;
      }
    }
    return c;
  }
  if (b.rank() == 1) {
    if (b.dim(0) != k) {
      throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                           " vs " + shape_str(b.shape()));
    }
    Tensor c(Shape{m});
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a.at2(i, p) * b.at(p);
      c.at(i) = s;
    }
    return c;
  }
  throw DimensionError("matmul: right operand must be rank 1 or 2");
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("transpose requires rank 2");
  Tensor t(Shape{a.dim(1), a.dim(0)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < a.dim(1); ++j) t.at2(j, i) = a.at2(i, j);
  return t;
}

double dot(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw DimensionError("dot: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.at(i) * b.at(i);
  return s;
}

double norm2(const Tensor& a) { return std::sqrt(dot(a, a)); }

Tensor l2_normalize(const Tensor& v, double eps) {
  const double m = std::max(norm2(v), eps);
  Tensor out(v.shape());
  for (std::size_t i = 0; i < v.size(); ++i) out.at(i) = v.at(i) / m;
  return out;
}

CosineValue cosine(const Tensor& u, const Tensor& v, double eps) {
  if (u.size() != v.size()) throw DimensionError("cosine: size mismatch");
  const double nu = norm2(u), nv = norm2(v);
  if (nu < eps || nv < eps) return {0.0, true};
  const double c = dot(u, v) / (nu * nv);
  return {std::clamp(c, -1.0, 1.0), false};
}

Tensor qr_orthonormalize(const Tensor& m) {
  if (m.rank() != 2) throw DimensionError("qr_orthonormalize requires rank 2");
  const std::size_t rows = m.dim(0), cols = m.dim(1);
  if (cols > rows) throw DimensionError("qr_orthonormalize: more columns than rows");

  // Householder on a working copy; accumulate Q by applying the stored
  // reflectors to the leading columns of the identity.
  Tensor r = m;
  std::vector<Tensor> reflectors;  // unit-scaled Householder vectors
  std::vector<double> betas;
  for (std::size_t j = 0; j < cols; ++j) {
    double norm_x = 0.0;
    for (std::size_t i = j; i < rows; ++i) norm_x += r.at2(i, j) * r.at2(i, j);
    norm_x = std::sqrt(norm_x);
    const double tol = 1e-12 * std::max(1.0, norm_x);
    if (norm_x < 1e-300) {
      throw FactorizationError("qr_orthonormalize: rank-deficient input, column " +
                               std::to_string(j) + " is dependent");
    }
    const double x0 = r.at2(j, j);
    const double alpha = (x0 >= 0.0) ? -norm_x : norm_x;
    Tensor v(Shape{rows});
    for (std::size_t i = j; i < rows; ++i) v.at(i) = r.at2(i, j);
    v.at(j) -= alpha;
    double vnorm_sq = 0.0;
    for (std::size_t i = j; i < rows; ++i) vnorm_sq += v.at(i) * v.at(i);
    if (vnorm_sq < tol * tol) {
      // Column already reduced; record an inert reflector.
      reflectors.push_back(Tensor(Shape{rows}));
      betas.push_back(0.0);
      r.at2(j, j) = alpha;
      continue;
    }
    const double beta = 2.0 / vnorm_sq;
    for (std::size_t c = j; c < cols; ++c) {
      double s = 0.0;
      for (std::size_t i = j; i < rows; ++i) s += v.at(i) * r.at2(i, c);
      s *= beta;
      for (std::size_t i = j; i < rows; ++i) r.at2(i, c) -= s * v.at(i);
    }
    if (std::abs(r.at2(j, j)) < 1e-10 * std::max(1.0, norm_x)) {
      throw FactorizationError("qr_orthonormalize: rank-deficient input, column " +
                               std::to_string(j) + " is dependent");
    }
    reflectors.push_back(v);
    betas.push_back(beta);
  }

  // Q = H_0 ... H_{cols-1} applied to the first `cols` identity columns.
  Tensor q(Shape{rows, cols});
  for (std::size_t j = 0; j < cols && j < rows; ++j) q.at2(j, j) = 1.0;
  for (std::size_t jj = cols; jj-- > 0;) {
    if (betas[jj] == 0.0) continue;
    const Tensor& v = reflectors[jj];
    for (std::size_t c = 0; c < cols; ++c) {
      double s = 0.0;
      for (std::size_t i = jj; i < rows; ++i) s += v.at(i) * q.at2(i, c);
      s *= betas[jj];
      for (std::size_t i = jj; i < rows; ++i) q.at2(i, c) -= s * v.at(i);
    }
  }

  // Fix signs so every R diagonal is nonnegative.
  for (std::size_t j = 0; j < cols; ++j) {
    if (r.at2(j, j) < 0.0) {
      for (std::size_t i = 0; i < rows; ++i) q.at2(i, j) = -q.at2(i, j);
    }
  }
  return q;
}

Tensor softmax(const Tensor& logits, double temperature) {
  if (temperature <= 0.0) throw ConfigError("softmax temperature must be positive");
  Tensor out(logits.shape());
  double mx = -INFINITY;
  for (std::size_t i = 0; i < logits.size(); ++i)
    mx = std::max(mx, logits.at(i) / temperature);
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out.at(i) = std::exp(logits.at(i) / temperature - mx);
    z += out.at(i);
  }
  for (std::size_t i = 0; i < logits.size(); ++i) out.at(i) /= z;
  return out;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
  return cdf + x * pdf;
}

double gram_identity_gap_sq(const Tensor& a) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1))
    throw DimensionError("gram_identity_gap_sq requires a square matrix");
  const std::size_t d = a.dim(0);
  double acc = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      double g = 0.0;
      for (std::size_t p = 0; p < d; ++p) g += a.at2(p, i) * a.at2(p, j);
      const double delta = g - (i == j ? 1.0 : 0.0);
      acc += delta * delta;
    }
  }
  return acc;
}

}  // namespace ermoe
