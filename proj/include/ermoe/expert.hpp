// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "ermoe/params.hpp"
#include "ermoe/rng.hpp"
#include "ermoe/tape.hpp"
#include "ermoe/tensor.hpp"

namespace ermoe {

enum class Nonlinearity { Identity, Gelu };
enum class ExpertKind { Free, Region };

/// One eigen-reparameterized weight: W = U diag(s) V^T with square
/// orthonormal-by-construction U, V and trainable coefficients s.
struct EigenLayer {
  Param U;  // [d,d]
  Param V;  // [d,d]
  Param s;  // [d]
};

/// Expert whose every weight matrix lives in the U diag(s) V^T
/// parameterization, so the orthogonality penalty covers all of it.
/// One layer by default: f(x) = phi(U diag(s) V^T x). The two-layer config
/// stacks a second independent triple with GELU between.
class EigenExpert {
public:
  /// Fresh expert: U, V orthonormalized Gaussian draws, s = ones. Starting
  /// orthonormal puts the penalty at exactly zero.
  EigenExpert(const std::string& name, std::size_t d, std::size_t routing_rank,
              Nonlinearity nl, int num_layers, Rng& rng,
              ExpertKind kind = ExpertKind::Free, int region_tag = -1);

  std::size_t dim() const { return d_; }
  std::size_t routing_rank() const { return routing_rank_; }
  Nonlinearity nonlinearity() const { return nl_; }
  ExpertKind kind() const { return kind_; }
  int region_tag() const { return region_tag_; }
  int num_layers() const { return static_cast<int>(layers_.size()); }

  EigenLayer& layer(int i) { return layers_[static_cast<std::size_t>(i)]; }
  const EigenLayer& layer(int i) const { return layers_[static_cast<std::size_t>(i)]; }

  /// Routing basis = first layer's U; columns ranked by descending |s|
  /// (ties on lower column index). The leading `routing_rank` columns form
  /// the score sub-basis.
  const Param& routing_basis() const { return layers_[0].U; }
  std::vector<std::size_t> basis_order() const;

  /// Materialized first-layer weight, differentiable w.r.t. U, s, V.
  Var weight(Binding& bind) const;
  Tensor weight_value() const;

  /// Expert function applied to a length-d input.
  Var forward(Binding& bind, const Var& x) const;
  Tensor forward_value(const Tensor& x) const;

  /// sum over layers of ||U^T U - I||_F^2 + ||V^T V - I||_F^2.
  Var ortho_penalty(Binding& bind) const;
  double ortho_penalty_value() const;

  /// Projects U and V of every layer back to exact orthonormality via QR;
  /// s is untouched. Throws FactorizationError on rank deficiency.
  void reorthogonalize();

  /// Learned routing target for the score_target=LearnedVector variant.
  /// Allocated lazily; length = routing_rank.
  Param& learned_target(Rng& rng);
  bool has_learned_target() const { return learned_target_.value.size() > 0; }
  Param& learned_target_param() { return learned_target_; }
  const Param& learned_target_param() const { return learned_target_; }

  void collect_params(std::vector<Param*>& out);

private:
  std::size_t d_;
  std::size_t routing_rank_;
  Nonlinearity nl_;
  ExpertKind kind_;
  int region_tag_;
  std::vector<EigenLayer> layers_;
  Param learned_target_;
  std::string name_;
};

/// Ordered list of experts sharing d and routing rank; indices are stable
/// across save/load.
class ExpertBank {
public:
  ExpertBank() = default;
  ExpertBank(const std::string& name, std::size_t count, std::size_t d,
             std::size_t routing_rank, Nonlinearity nl, int num_layers, Rng& rng,
             std::size_t num_region = 0);

  std::size_t size() const { return experts_.size(); }
  EigenExpert& operator[](std::size_t i) { return experts_[i]; }
  const EigenExpert& operator[](std::size_t i) const { return experts_[i]; }

  void reorthogonalize_all();
  double max_ortho_penalty() const;
  void collect_params(std::vector<Param*>& out);

private:
  std::vector<EigenExpert> experts_;
};

Var apply_nonlinearity(Nonlinearity nl, const Var& x);

}  // namespace ermoe
