// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "ermoe/tensor.hpp"

namespace ermoe {

inline constexpr double kNormEps = 1e-12;

/// Plain (non-differentiable) dense kernels. The tape in tape.hpp wraps the
/// same math with adjoints; these run on raw Tensors for initialization,
/// orthogonalization, analysis and test oracles.

/// Row-major matrix product. Accepts a: [m,k] with b: [k,n] or b: [k].
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor transpose(const Tensor& a);

double dot(const Tensor& a, const Tensor& b);
double norm2(const Tensor& a);

/// v / max(||v||, eps). Unit norm whenever ||v|| >= eps; the zero vector maps
/// to itself.
Tensor l2_normalize(const Tensor& v, double eps = kNormEps);

struct CosineValue {
  double value = 0.0;       // clamped to [-1, 1]
  bool degenerate = false;  // either input below eps norm
};

CosineValue cosine(const Tensor& u, const Tensor& v, double eps = kNormEps);

/// Q factor of a Householder QR with nonnegative R diagonal, so the result is
/// unique and re-orthogonalization is a deterministic projection.
/// Throws FactorizationError naming the offending column on rank deficiency.
Tensor qr_orthonormalize(const Tensor& m);

/// Max-subtracted softmax of logits / temperature. temperature must be > 0.
Tensor softmax(const Tensor& logits, double temperature = 1.0);

double gelu(double x);
double gelu_grad(double x);

/// || a^T a - I ||_F^2 for a square matrix.
double gram_identity_gap_sq(const Tensor& a);

}  // namespace ermoe
