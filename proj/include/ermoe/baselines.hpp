// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "ermoe/expert.hpp"
#include "ermoe/params.hpp"
#include "ermoe/tape.hpp"

namespace ermoe {

/// Token-choice comparison arm: learned gate logits, top-k by logit, softmax
/// weights over the selected set. Experts are plain dense layers so the
/// comparison isolates the routing mechanism.
struct LogitRouter {
  Param gate;  // [E, d]
  std::size_t k = 2;
  double lbl_coefficient = 0.0;  // beta; 0 disables the auxiliary loss

  LogitRouter() = default;
  LogitRouter(const std::string& name, std::size_t num_experts, std::size_t d,
              std::size_t top_k, double beta, Rng& rng);
};

struct DenseExpert {
  Param w;  // [d, d]
  Param b;  // [d]
  Nonlinearity nl = Nonlinearity::Gelu;

  DenseExpert() = default;
  DenseExpert(const std::string& name, std::size_t d, Nonlinearity nl, Rng& rng);
  Var forward(Binding& bind, const Var& x) const;
};

/// Per-token record used for the load-balance statistics.
struct LogitDecision {
  std::vector<double> probs;          // full softmax over all E logits
  std::size_t top1 = 0;
  std::vector<std::size_t> selected;  // by logit desc, ties to lower index
  std::vector<double> weights;        // softmax over selected logits
};

struct LogitRouteResult {
  LogitDecision decision;
  std::vector<Var> weight_vars;  // aligned with decision.selected
  Var probs;                     // softmax over all logits (for the LBL term)
};

LogitRouteResult logit_route(Binding& bind, LogitRouter& router, const Var& x);

/// Switch-style importance-times-load product: E * sum_e f_e * P_e with
/// f_e the fraction of tokens whose top-1 expert is e and P_e the mean
/// softmax probability of e. Equals 1 exactly under uniform usage.
double load_balance_loss(const std::vector<LogitDecision>& batch);

/// Differentiable counterpart: dispatch fractions stay constant, the mean
/// probabilities carry gradient.
Var load_balance_loss(GradTape& tape, const std::vector<LogitDecision>& batch,
                      const std::vector<Var>& prob_vars);

}  // namespace ermoe
