// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <vector>

#include "ermoe/tensor.hpp"

namespace ermoe {

class GradTape;

/// Handle to a node on a GradTape. Cheap to copy; valid only while the owning
/// tape is alive. A default-constructed Var is invalid.
class Var {
public:
  Var() = default;
  const Tensor& value() const;
  bool valid() const { return tape_ != nullptr; }
  int id() const { return id_; }
  GradTape* tape() const { return tape_; }

private:
  friend class GradTape;
  Var(GradTape* tape, int id) : tape_(tape), id_(id) {}
  GradTape* tape_ = nullptr;
  int id_ = -1;
};

/// Recorded computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so walking ids downward from the
/// loss visits a reverse topological order; backward() marks the ancestor set
/// first and runs each reachable adjoint exactly once. Single-owner: do not
/// share one tape across threads.
class GradTape {
public:
  GradTape() = default;
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  /// New leaf holding `value`. Leaves have no adjoint of their own; their
  /// gradients are read out after backward().
  Var leaf(Tensor value);

  /// Runs reverse-mode accumulation from a scalar `loss`. Gradients of all
  /// nodes reachable from the loss become available through grad(); nodes the
  /// loss never touched report zero.
  void backward(const Var& loss);

  /// Gradient of the last backward() root w.r.t. `v` (zero tensor if the loss
  /// did not depend on v).
  const Tensor& grad(const Var& v) const;

  const Tensor& value(const Var& v) const;
  std::size_t node_count() const { return nodes_.size(); }

  // --- internal plumbing for the op layer ---
  using Backprop = std::function<void(GradTape&, int self)>;
  Var emit(Tensor value, std::vector<int> parents, Backprop backprop);
  Tensor& grad_slot(int id) { return nodes_[static_cast<std::size_t>(id)].grad; }
  const Tensor& value_of(int id) const {
    return nodes_[static_cast<std::size_t>(id)].value;
  }

private:
  struct Node {
    Tensor value;
    Tensor grad;  // allocated during backward for reachable nodes
    std::vector<int> parents;
    Backprop backprop;  // empty for leaves
  };
  std::vector<Node> nodes_;
  bool ran_backward_ = false;
  Tensor zero_scalar_ = Tensor::scalar(0.0);
};

// ---------------------------------------------------------------------------
// Differentiable primitives. Each op records one node with a hand-written
// vector-Jacobian product; see tests/test_tape.cpp for the finite-difference
// check that covers every primitive.
// ---------------------------------------------------------------------------

Var add(const Var& a, const Var& b);          // same shape
Var sub(const Var& a, const Var& b);          // same shape
Var mul(const Var& a, const Var& b);          // elementwise, same shape
Var neg(const Var& a);
Var scale(const Var& a, double c);            // constant factor
Var square(const Var& a);
Var abs_val(const Var& a);
Var relu(const Var& a);
Var gelu_op(const Var& a);

Var sum(const Var& a);                        // -> scalar
Var mean(const Var& a);                       // -> scalar
Var dot(const Var& a, const Var& b);          // rank 1, -> scalar

Var matmul(const Var& a, const Var& b);       // [m,k]x[k,n] or [m,k]x[k]
Var transpose(const Var& a);

Var row(const Var& a, std::size_t i);                         // [n,d] -> [d]
Var slice_cols(const Var& a, std::size_t c0, std::size_t c1); // [n,d] -> [n,c1-c0]
Var gather_cols(const Var& a, std::vector<std::size_t> idx);  // column subset/permutation
Var concat_rows(const std::vector<Var>& rows);                // n x [d] -> [n,d]
Var concat_cols(const std::vector<Var>& mats);                // [n,ci] -> [n,sum ci]
Var concat_scalars(const std::vector<Var>& vals);             // -> [n]
Var add_rowvec(const Var& a, const Var& b);   // [n,d] + [d] broadcast over rows
Var col_scale(const Var& a, const Var& s);    // [n,d] * diag(s)

Var mul_scalar(const Var& v, const Var& s);   // tensor * scalar Var
Var div_scalar(const Var& v, const Var& s);   // tensor / scalar Var

/// v / max(||v||, eps); see linalg.hpp for the value semantics.
Var l2_normalize(const Var& v, double eps = 1e-12);

struct CosineVar {
  Var score;        // scalar; constant 0 when degenerate
  bool degenerate;  // either input below eps norm (no gradient path)
};
CosineVar cosine(const Var& u, const Var& v, double eps = 1e-12);

Var softmax(const Var& logits, double temperature = 1.0);  // rank 1
Var row_softmax(const Var& logits, double temperature = 1.0);
Var log_softmax(const Var& logits);  // rank 1

/// Scalar-valued loss helpers.
Var frobenius_sq(const Var& a);                     // sum of squares
Var dot_const(const Var& a, const Tensor& c);       // <a, c>, c fixed

}  // namespace ermoe
