// SPDX-License-Identifier: Apache-2.0
#include "ermoe/expert.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ermoe/errors.hpp"
#include "ermoe/linalg.hpp"

namespace ermoe {

Var apply_nonlinearity(Nonlinearity nl, const Var& x) {
  return nl == Nonlinearity::Gelu ? gelu_op(x) : x;
}

static Tensor apply_nonlinearity_value(Nonlinearity nl, Tensor x) {
  if (nl == Nonlinearity::Gelu)
    for (double& v : x.data()) v = gelu(v);
  return x;
}

EigenExpert::EigenExpert(const std::string& name, std::size_t d, std::size_t routing_rank,
                         Nonlinearity nl, int num_layers, Rng& rng, ExpertKind kind,
                         int region_tag)
    : d_(d), routing_rank_(routing_rank), nl_(nl), kind_(kind), region_tag_(region_tag),
      name_(name) {
  if (routing_rank_ == 0 || routing_rank_ > d_)
    throw ConfigError("routing rank must satisfy 1 <= r <= d");
  if (num_layers != 1 && num_layers != 2)
    throw ConfigError("expert supports 1 or 2 eigen layers");
  for (int l = 0; l < num_layers; ++l) {
    const std::string p = name + ".l" + std::to_string(l);
    layers_.push_back(EigenLayer{
        Param(p + ".U", "experts", qr_orthonormalize(rng.normal_tensor(Shape{d, d}))),
        Param(p + ".V", "experts", qr_orthonormalize(rng.normal_tensor(Shape{d, d}))),
        Param(p + ".s", "experts", Tensor::full(Shape{d}, 1.0))});
  }
}

std::vector<std::size_t> EigenExpert::basis_order() const {
  const Tensor& s = layers_[0].s.value;
  std::vector<std::size_t> order(d_);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(s.at(a)) > std::abs(s.at(b));
  });
  return order;
}

Var EigenExpert::weight(Binding& bind) const {
  auto& self = const_cast<EigenExpert&>(*this);
  Var u = bind(self.layers_[0].U);
  Var v = bind(self.layers_[0].V);
  Var s = bind(self.layers_[0].s);
  return matmul(col_scale(u, s), transpose(v));
}

Tensor EigenExpert::weight_value() const {
  const EigenLayer& l = layers_[0];
  Tensor us = l.U.value;
  for (std::size_t i = 0; i < d_; ++i)
    for (std::size_t j = 0; j < d_; ++j) us.at2(i, j) *= l.s.value.at(j);
  return matmul(us, transpose(l.V.value));
}

Var EigenExpert::forward(Binding& bind, const Var& x) const {
  if (x.value().rank() != 1 || x.value().dim(0) != d_)
    throw DimensionError("expert_forward: input must have length " + std::to_string(d_));
  auto& self = const_cast<EigenExpert&>(*this);
  Var h = x;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    Var u = bind(self.layers_[l].U);
    Var v = bind(self.layers_[l].V);
    Var s = bind(self.layers_[l].s);
    // U diag(s) V^T h evaluated right-to-left; W itself is never materialized.
    Var h3 = matmul(u, mul(s, matmul(transpose(v), h)));
    // Activation sits after the first layer only.
    h = (l == 0) ? apply_nonlinearity(nl_, h3) : h3;
  }
  return h;
}

Tensor EigenExpert::forward_value(const Tensor& x) const {
  if (x.rank() != 1 || x.dim(0) != d_)
    throw DimensionError("expert_forward: input must have length " + std::to_string(d_));
  Tensor h = x;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const EigenLayer& lay = layers_[l];
    Tensor h1 = matmul(transpose(lay.V.value), h);
    for (std::size_t i = 0; i < d_; ++i) h1.at(i) *= lay.s.value.at(i);
    Tensor h3 = matmul(lay.U.value, h1);
    h = (l == 0) ? apply_nonlinearity_value(nl_, std::move(h3)) : std::move(h3);
  }
  return h;
}

Var EigenExpert::ortho_penalty(Binding& bind) const {
  auto& self = const_cast<EigenExpert&>(*this);
  Var total;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    for (Param* m : {&self.layers_[l].U, &self.layers_[l].V}) {
      Var b = bind(*m);
      Var gap = sub(matmul(transpose(b), b), bind.tape().leaf(Tensor::identity(d_)));
      Var pen = frobenius_sq(gap);
      total = total.valid() ? add(total, pen) : pen;
    }
  }
  return total;
}

double EigenExpert::ortho_penalty_value() const {
  double total = 0.0;
  for (const EigenLayer& l : layers_) {
    total += gram_identity_gap_sq(l.U.value);
    total += gram_identity_gap_sq(l.V.value);
  }
  return total;
}

void EigenExpert::reorthogonalize() {
  for (EigenLayer& l : layers_) {
    l.U.value = qr_orthonormalize(l.U.value);
    l.V.value = qr_orthonormalize(l.V.value);
  }
}

Param& EigenExpert::learned_target(Rng& rng) {
  if (learned_target_.value.size() == 0) {
    learned_target_ = Param(name_ + ".psi", "experts",
                            rng.normal_tensor(Shape{routing_rank_},
                                              1.0 / std::sqrt(double(routing_rank_))));
  }
  return learned_target_;
}

void EigenExpert::collect_params(std::vector<Param*>& out) {
  for (EigenLayer& l : layers_) {
    out.push_back(&l.U);
    out.push_back(&l.V);
    out.push_back(&l.s);
  }
  if (learned_target_.value.size() > 0) out.push_back(&learned_target_);
}

ExpertBank::ExpertBank(const std::string& name, std::size_t count, std::size_t d,
                       std::size_t routing_rank, Nonlinearity nl, int num_layers,
                       Rng& rng, std::size_t num_region) {
  if (count == 0) throw ConfigError("expert bank must hold at least one expert");
  if (num_region > count) throw ConfigError("more region experts than experts");
  for (std::size_t e = 0; e < count; ++e) {
    const bool region = e < num_region;
    experts_.emplace_back(name + ".expert" + std::to_string(e), d, routing_rank, nl,
                          num_layers, rng,
                          region ? ExpertKind::Region : ExpertKind::Free,
                          region ? static_cast<int>(e) : -1);
  }
}

void ExpertBank::reorthogonalize_all() {
  for (EigenExpert& e : experts_) e.reorthogonalize();
}

double ExpertBank::max_ortho_penalty() const {
  double m = 0.0;
  for (const EigenExpert& e : experts_) m = std::max(m, e.ortho_penalty_value());
  return m;
}

void ExpertBank::collect_params(std::vector<Param*>& out) {
  for (EigenExpert& e : experts_) e.collect_params(out);
}

}  // namespace ermoe
