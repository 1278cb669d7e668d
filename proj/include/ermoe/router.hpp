// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "ermoe/expert.hpp"
#include "ermoe/params.hpp"
#include "ermoe/tape.hpp"

namespace ermoe {

enum class Fallback : std::uint8_t { None, Partial, Full };
enum class WeightFloorPolicy : std::uint8_t { UniformFallback };
enum class ScoreTarget : std::uint8_t { AttentionContext, LearnedVector };

const char* fallback_name(Fallback f);

struct RouterConfig {
  std::size_t k = 2;
  double threshold = 0.5;  // T in [0,1)
  std::size_t routing_rank = 0;
  WeightFloorPolicy weight_floor = WeightFloorPolicy::UniformFallback;
  ScoreTarget score_target = ScoreTarget::AttentionContext;

  void validate(std::size_t num_experts) const;
};

/// Everything the analyses need about one token's routing.
struct RoutingDecision {
  std::vector<double> scores;          // per expert, in [-1,1]
  std::vector<std::size_t> eligible;   // ascending expert index
  std::vector<std::size_t> selected;   // descending score, ties by lower index
  std::vector<double> weights;         // aligned with selected; sums to 1
  Fallback fallback = Fallback::None;
  bool degenerate = false;             // any expert score hit a norm guard
};

/// Attention-weighted context: sum_j alpha_j z_j. alpha must be nonnegative
/// and sum to 1 within 1e-6.
Tensor context_vector(const Tensor& attn_row, const Tensor& values);
Var context_vector(const Var& attn_row, const Var& values);

/// Cosine between the projections of the normalized token and its normalized
/// context onto the leading `r` columns of the expert's basis (columns ranked
/// by |s|). Degenerate inputs or projections score 0 with the flag set.
struct ScoreVar {
  Var score;
  bool degenerate;
};
ScoreVar eigenbasis_score(Binding& bind, const EigenExpert& expert, const Var& x,
                          const Var& c, std::size_t r);
double eigenbasis_score_value(const EigenExpert& expert, const Tensor& x,
                              const Tensor& c, std::size_t r, bool* degenerate = nullptr);

struct Selection {
  std::vector<std::size_t> selected;
  std::vector<std::size_t> eligible;
  Fallback fallback = Fallback::None;
};

/// Thresholded top-k: experts scoring >= T are eligible; a short eligible set
/// is topped up with the best-scoring remainder (Partial), and an empty one
/// falls back to the global top-k (Full). Degenerate scores never count as
/// eligible.
Selection select_experts(const std::vector<double>& scores, const RouterConfig& cfg,
                         const std::vector<char>& degenerate_mask = {});

/// max(score, 0) renormalized over the selected set; all-nonpositive scores
/// give uniform weights (WeightFloorPolicy::UniformFallback).
std::vector<double> mixture_weights(const std::vector<double>& selected_scores);
std::vector<Var> mixture_weights(GradTape& tape, const std::vector<Var>& selected_scores);

/// Convex combination of expert outputs.
Tensor fuse(const std::vector<double>& weights, const std::vector<Tensor>& outputs);
Var fuse(const std::vector<Var>& weights, const std::vector<Var>& outputs);

struct RouteResult {
  Var output;
  RoutingDecision decision;
};

/// Full per-token pipeline: score every expert, select, weight, fuse.
/// Gradients flow through the weights (via the scores) and the selected
/// experts' outputs; set membership itself is discrete.
RouteResult route_token(Binding& bind, const Var& x, const Var& c,
                        const ExpertBank& bank, const RouterConfig& cfg);

}  // namespace ermoe
