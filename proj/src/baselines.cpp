// SPDX-License-Identifier: Apache-2.0
#include "ermoe/baselines.hpp"

#include <algorithm>
#include <numeric>

#include "ermoe/errors.hpp"
#include "ermoe/linalg.hpp"

namespace ermoe {

LogitRouter::LogitRouter(const std::string& name, std::size_t num_experts, std::size_t d,
                         std::size_t top_k, double beta, Rng& rng)
    : gate(name + ".gate", "router", rng.normal_tensor(Shape{num_experts, d}, 0.02)),
      k(top_k), lbl_coefficient(beta) {
  if (k == 0 || k > num_experts) throw ConfigError("logit router: 1 <= k <= E required");
  if (beta < 0.0) throw ConfigError("logit router: lbl coefficient must be >= 0");
}

DenseExpert::DenseExpert(const std::string& name, std::size_t d, Nonlinearity nl_, Rng& rng)
    : w(name + ".w", "experts", rng.normal_tensor(Shape{d, d}, 0.02)),
      b(name + ".b", "experts", Tensor(Shape{d})), nl(nl_) {}

Var DenseExpert::forward(Binding& bind, const Var& x) const {
  auto& self = const_cast<DenseExpert&>(*this);
  Var h = add(matmul(bind(self.w), x), bind(self.b));
  return apply_nonlinearity(nl, h);
}

LogitRouteResult logit_route(Binding& bind, LogitRouter& router, const Var& x) {
  const std::size_t E = router.gate.value.dim(0);
  Var logits = matmul(bind(router.gate), x);
  Var probs = softmax(logits, 1.0);

  LogitRouteResult res;
  res.probs = probs;
  res.decision.probs.assign(probs.value().data().begin(), probs.value().data().end());

  std::vector<std::size_t> order(E);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return logits.value().at(a) > logits.value().at(b);
  });
  res.decision.top1 = order[0];
  res.decision.selected.assign(order.begin(),
                               order.begin() + static_cast<std::ptrdiff_t>(router.k));

  // Softmax restricted to the selected logits.
  std::vector<Var> sel;
  for (std::size_t e : res.decision.selected) {
    // One-element slice of the logit vector keeps the gradient path.
    sel.push_back(dot_const(logits, [&] {
      Tensor mask(Shape{E});
      mask.at(e) = 1.0;
      return mask;
    }()));
  }
  Var sel_vec = concat_scalars(sel);
  Var w = softmax(sel_vec, 1.0);
  for (std::size_t i = 0; i < router.k; ++i) {
    res.weight_vars.push_back(dot_const(w, [&] {
      Tensor mask(Shape{router.k});
      mask.at(i) = 1.0;
      return mask;
    }()));
    res.decision.weights.push_back(w.value().at(i));
  }
  return res;
}

double load_balance_loss(const std::vector<LogitDecision>& batch) {
  if (batch.empty()) throw ContractError("load_balance_loss: empty batch");
  const std::size_t E = batch.front().probs.size();
  std::vector<double> dispatch(E, 0.0), importance(E, 0.0);
  for (const LogitDecision& d : batch) {
    dispatch[d.top1] += 1.0;
    for (std::size_t e = 0; e < E; ++e) importance[e] += d.probs[e];
  }
  const double n = static_cast<double>(batch.size());
  double loss = 0.0;
  for (std::size_t e = 0; e < E; ++e)
    loss += (dispatch[e] / n) * (importance[e] / n);
  return static_cast<double>(E) * loss;
}

Var load_balance_loss(GradTape& tape, const std::vector<LogitDecision>& batch,
                      const std::vector<Var>& prob_vars) {
  if (batch.empty() || prob_vars.size() != batch.size())
    throw ContractError("load_balance_loss: batch and prob vars must align");
  const std::size_t E = batch.front().probs.size();
  std::vector<double> dispatch(E, 0.0);
  for (const LogitDecision& d : batch) dispatch[d.top1] += 1.0;
  const double n = static_cast<double>(batch.size());

  // E * sum_e f_e * mean_i probs_i[e]  ==  dot(mean probs, E*f)
  Tensor coeff(Shape{E});
  for (std::size_t e = 0; e < E; ++e)
    coeff.at(e) = static_cast<double>(E) * dispatch[e] / n;
  Var acc;
  for (const Var& p : prob_vars) {
    Var term = dot_const(p, coeff);
    acc = acc.valid() ? add(acc, term) : term;
  }
  return scale(acc, 1.0 / n);
}

}  // namespace ermoe
