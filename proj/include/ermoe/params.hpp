// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ermoe/tape.hpp"
#include "ermoe/tensor.hpp"

namespace ermoe {

/// Trainable tensor with a running gradient accumulator.
struct Param {
  std::string name;
  std::string group;  // reporting bucket for gradcheck ("experts", "attention", ...)
  Tensor value;
  Tensor grad;

  Param() = default;
  Param(std::string n, std::string g, Tensor v)
      : name(std::move(n)), group(std::move(g)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(0.0); }
};

/// Per-tape association of Params with leaf nodes. Forward passes bind the
/// parameters they touch; after backward() the accumulated tape gradients are
/// folded back into Param::grad in binding order.
class Binding {
public:
  explicit Binding(GradTape& tape) : tape_(&tape) {}

  Var operator()(Param& p) {
    auto it = index_.find(&p);
    if (it != index_.end()) return bound_[it->second].second;
    Var v = tape_->leaf(p.value);
    index_.emplace(&p, bound_.size());
    bound_.emplace_back(&p, v);
    return v;
  }

  /// p.grad += scale * d(loss)/d(p) for every bound parameter.
  void accumulate_grads(double scale = 1.0) {
    for (auto& [p, v] : bound_) {
      const Tensor& g = tape_->grad(v);
      for (std::size_t i = 0; i < g.size(); ++i) p->grad.at(i) += scale * g.at(i);
    }
  }

  GradTape& tape() { return *tape_; }

private:
  GradTape* tape_;
  std::vector<std::pair<Param*, Var>> bound_;
  std::unordered_map<const Param*, std::size_t> index_;
};

}  // namespace ermoe
