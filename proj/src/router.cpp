// SPDX-License-Identifier: Apache-2.0
#include "ermoe/router.hpp"

#include <algorithm>
#include <cmath>

#include "ermoe/errors.hpp"
#include "ermoe/linalg.hpp"

namespace ermoe {

const char* fallback_name(Fallback f) {
  switch (f) {
    case Fallback::None: return "none";
    case Fallback::Partial: return "partial";
    case Fallback::Full: return "full";
  }
  return "?";
}

void RouterConfig::validate(std::size_t num_experts) const {
  if (k == 0 || k > num_experts)
    throw ConfigError("router k must satisfy 1 <= k <= E (k=" + std::to_string(k) +
                      ", E=" + std::to_string(num_experts) + ")");
  if (threshold < 0.0 || threshold >= 1.0)
    throw ConfigError("router threshold must lie in [0, 1)");
}

namespace {

void check_attention_row(const Tensor& attn_row, std::size_t n) {
  if (attn_row.rank() != 1 || attn_row.dim(0) != n)
    throw DimensionError("context_vector: attention row length mismatch");
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    if (attn_row.at(j) < 0.0)
      throw ContractError("context_vector: negative attention weight");
    s += attn_row.at(j);
  }
  if (std::abs(s - 1.0) > 1e-6)
    throw ContractError("context_vector: attention row does not sum to 1");
}

}  // namespace

Tensor context_vector(const Tensor& attn_row, const Tensor& values) {
  if (values.rank() != 2) throw DimensionError("context_vector: values must be [n,d]");
  const std::size_t n = values.dim(0), d = values.dim(1);
  check_attention_row(attn_row, n);
  Tensor c(Shape{d});
  for (std::size_t j = 0; j < d; ++j) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += values.at2(i, j) * attn_row.at(i);
    c.at(j) = acc;
  }
  return c;
}

Var context_vector(const Var& attn_row, const Var& values) {
  if (values.value().rank() != 2)
    throw DimensionError("context_vector: values must be [n,d]");
  check_attention_row(attn_row.value(), values.value().dim(0));
  return matmul(transpose(values), attn_row);
}

ScoreVar eigenbasis_score(Binding& bind, const EigenExpert& expert, const Var& x,
                          const Var& c, std::size_t r) {
  if (r == 0 || r > expert.dim())
    throw ConfigError("eigenbasis_score: rank must satisfy 1 <= r <= d");
  GradTape& tape = bind.tape();
  const bool x_zero = norm2(x.value()) < kNormEps;
  const bool c_zero = norm2(c.value()) < kNormEps;
  if (x_zero || c_zero) {
    return {tape.leaf(Tensor::scalar(0.0)), true};
  }
  Var xt = l2_normalize(x, kNormEps);
  std::vector<std::size_t> order = expert.basis_order();
  order.resize(r);
  auto& e = const_cast<EigenExpert&>(expert);
  Var basis = gather_cols(bind(const_cast<Param&>(e.routing_basis())), order);
  Var u = matmul(transpose(basis), xt);
  Var v;
  if (expert.has_learned_target()) {
    v = bind(e.learned_target_param());
  } else {
    Var ct = l2_normalize(c, kNormEps);
    v = matmul(transpose(basis), ct);
  }
  CosineVar cv = cosine(u, v, kNormEps);
  return {cv.score, cv.degenerate};
}

double eigenbasis_score_value(const EigenExpert& expert, const Tensor& x,
                              const Tensor& c, std::size_t r, bool* degenerate) {
  GradTape tape;
  Binding bind(tape);
  ScoreVar sv = eigenbasis_score(bind, expert, tape.leaf(x), tape.leaf(c), r);
  if (degenerate) *degenerate = sv.degenerate;
  return sv.score.value().item();
}

Selection select_experts(const std::vector<double>& scores, const RouterConfig& cfg,
                         const std::vector<char>& degenerate_mask) {
  const std::size_t E = scores.size();
  cfg.validate(E);
  auto is_degenerate = [&](std::size_t e) {
    return !degenerate_mask.empty() && degenerate_mask[e];
  };

  Selection sel;
  for (std::size_t e = 0; e < E; ++e) {
    if (!is_degenerate(e) && scores[e] >= cfg.threshold) sel.eligible.push_back(e);
  }

  // Expert order by descending score, ties to the lower index.
  std::vector<std::size_t> by_score(E);
  for (std::size_t e = 0; e < E; ++e) by_score[e] = e;
  std::stable_sort(by_score.begin(), by_score.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] > scores[b];
  });

  if (sel.eligible.size() >= cfg.k) {
    sel.fallback = Fallback::None;
    for (std::size_t e : by_score) {
      if (sel.selected.size() == cfg.k) break;
      if (!is_degenerate(e) && scores[e] >= cfg.threshold) sel.selected.push_back(e);
    }
  } else if (!sel.eligible.empty()) {
    // Top up S_i^(k) with the best-scoring ineligible experts.
    sel.fallback = Fallback::Partial;
    for (std::size_t e : by_score) {
      if (sel.selected.size() == cfg.k) break;
      sel.selected.push_back(e);
    }
  } else {
    sel.fallback = Fallback::Full;
    sel.selected.assign(by_score.begin(),
                        by_score.begin() + static_cast<std::ptrdiff_t>(cfg.k));
  }
  return sel;
}

std::vector<double> mixture_weights(const std::vector<double>& selected_scores) {
  if (selected_scores.empty())
    throw ContractError("mixture_weights: selected set must be nonempty");
  std::vector<double> w(selected_scores.size());
  double total = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = std::max(selected_scores[i], 0.0);
    total += w[i];
  }
  if (total > 0.0) {
    for (double& x : w) x /= total;
  } else {
    const double u = 1.0 / static_cast<double>(w.size());
    for (double& x : w) x = u;
  }
  return w;
}

std::vector<Var> mixture_weights(GradTape& tape, const std::vector<Var>& selected_scores) {
  if (selected_scores.empty())
    throw ContractError("mixture_weights: selected set must be nonempty");
  std::vector<Var> clamped;
  clamped.reserve(selected_scores.size());
  double total = 0.0;
  for (const Var& s : selected_scores) {
    clamped.push_back(relu(s));
    total += clamped.back().value().item();
  }
  std::vector<Var> w;
  w.reserve(clamped.size());
  if (total > 0.0) {
    Var denom = clamped[0];
    for (std::size_t i = 1; i < clamped.size(); ++i) denom = add(denom, clamped[i]);
    for (const Var& c : clamped) w.push_back(div_scalar(c, denom));
  } else {
    // All clamped to zero: uniform split, no gradient path.
    const double u = 1.0 / static_cast<double>(clamped.size());
    for (std::size_t i = 0; i < clamped.size(); ++i)
      w.push_back(tape.leaf(Tensor::scalar(u)));
  }
  return w;
}

Tensor fuse(const std::vector<double>& weights, const std::vector<Tensor>& outputs) {
  if (weights.size() != outputs.size() || outputs.empty())
    throw DimensionError("fuse: weights and outputs must align and be nonempty");
  Tensor y(outputs[0].shape());
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    if (!outputs[i].same_shape(y)) throw DimensionError("fuse: output shape mismatch");
    for (std::size_t j = 0; j < y.size(); ++j) y.at(j) += weights[i] * outputs[i].at(j);
  }
  return y;
}

Var fuse(const std::vector<Var>& weights, const std::vector<Var>& outputs) {
  if (weights.size() != outputs.size() || outputs.empty())
    throw DimensionError("fuse: weights and outputs must align and be nonempty");
  Var y;
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    Var term = mul_scalar(outputs[i], weights[i]);
    y = y.valid() ? add(y, term) : term;
  }
  return y;
}

RouteResult route_token(Binding& bind, const Var& x, const Var& c,
                        const ExpertBank& bank, const RouterConfig& cfg) {
  const std::size_t E = bank.size();
  cfg.validate(E);
  const std::size_t r = cfg.routing_rank ? cfg.routing_rank : bank[0].routing_rank();

  RouteResult res;
  std::vector<Var> score_vars;
  std::vector<char> degenerate(E, 0);
  score_vars.reserve(E);
  res.decision.scores.resize(E);
  for (std::size_t e = 0; e < E; ++e) {
    ScoreVar sv = eigenbasis_score(bind, bank[e], x, c, r);
    score_vars.push_back(sv.score);
    degenerate[e] = sv.degenerate ? 1 : 0;
    res.decision.scores[e] = sv.score.value().item();
    if (sv.degenerate) res.decision.degenerate = true;
  }

  Selection sel = select_experts(res.decision.scores, cfg, degenerate);
  res.decision.eligible = std::move(sel.eligible);
  res.decision.selected = std::move(sel.selected);
  res.decision.fallback = sel.fallback;

  std::vector<Var> sel_scores;
  std::vector<Var> sel_outputs;
  for (std::size_t e : res.decision.selected) {
    sel_scores.push_back(score_vars[e]);
    sel_outputs.push_back(bank[e].forward(bind, x));
  }
  std::vector<Var> w = mixture_weights(bind.tape(), sel_scores);
  for (const Var& wi : w) res.decision.weights.push_back(wi.value().item());
  res.output = fuse(w, sel_outputs);
  return res;
}

}  // namespace ermoe
