// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "ermoe/baselines.hpp"
#include "ermoe/expert.hpp"
#include "ermoe/params.hpp"
#include "ermoe/router.hpp"

namespace ermoe {

enum class HeadKind : std::uint8_t { Classifier, AgeExpectation };
enum class ScoreInput : std::uint8_t { PreAttention, AttentionOutput };
enum class GateKind : std::uint8_t { Eigenbasis, LearnedLogit };

struct HeadConfig {
  HeadKind kind = HeadKind::Classifier;
  std::size_t num_classes = 0;
  std::vector<double> bins;  // age head
  double tau = 1.0;
};

struct InputConfig {
  enum class Kind : std::uint8_t { Tokens, Image, Volume } kind = Kind::Tokens;
  std::size_t tokens_per_sample = 0;  // Tokens
  std::size_t height = 0, width = 0, depth = 0, channels = 1, patch = 0;

  std::size_t patch_volume() const;
  std::size_t patch_count() const;  // excluding CLS; validates divisibility
};

struct ModelConfig {
  std::size_t d = 32;
  std::size_t depth = 4;  // M: every block hosts an MoE layer
  std::size_t heads = 2;
  std::size_t num_experts = 8;
  double lambda_ortho = 5e-5;
  Nonlinearity nonlinearity = Nonlinearity::Gelu;
  int expert_layers = 1;
  ScoreInput score_input = ScoreInput::PreAttention;
  GateKind gate = GateKind::Eigenbasis;
  std::size_t num_region_experts = 0;
  RouterConfig router;  // k, T, routing rank, policies
  HeadConfig head;
  InputConfig input;

  /// Fills derived defaults (routing rank d/4) and checks consistency.
  void resolve();
};

/// One labelled/tagged input. `input` is [n,d] tokens, [H,W,C] images or
/// [H,W,D,C] volumes depending on the model's InputConfig.
struct Sample {
  Tensor input;
  int label = -1;
  double target = 0.0;  // age regression
  int tag = -1;         // region/subspace tag for the specialization probe
};

struct AttentionParams {
  Param wq, wk, wv, wo;
  Param bq, bk, bv, bo;
  AttentionParams() = default;
  AttentionParams(const std::string& name, std::size_t d, Rng& rng);
  void collect(std::vector<Param*>& out);
};

/// z: per-token outputs with residual applied; alpha: row-stochastic
/// attention weights averaged over heads.
struct AttentionOutput {
  Var z;
  Var alpha;
};

AttentionOutput attention_block(Binding& bind, AttentionParams& p, const Var& tokens,
                                std::size_t heads);

/// One transformer block: attention plus either the eigen-routed bank or the
/// learned-logit baseline MoE.
struct Block {
  AttentionParams attn;
  GateKind gate = GateKind::Eigenbasis;
  ExpertBank bank;                        // Eigenbasis arm
  LogitRouter logit_router;               // LearnedLogit arm
  std::vector<DenseExpert> dense_experts; // LearnedLogit arm
};

struct BlockTrace {
  std::vector<RoutingDecision> decisions;      // one per token (both arms)
  std::vector<LogitDecision> logit_decisions;  // baseline arm only
  std::vector<Var> prob_vars;                  // baseline arm, feeds the LBL
  Tensor alpha;                                // head-averaged attention copy
};

struct ForwardOptions {
  int forced_expert = -1;  // bypass routing; train one expert directly
  const RouterConfig* router_override = nullptr;
  bool record_trace = true;
};

struct ForwardResult {
  Var logits;  // classifier logits or age bin logits
  Var probs;   // age head only
  Var age;     // age head only
  Var cls;     // final CLS representation
  std::vector<BlockTrace> trace;
};

struct AgeHeadResult {
  Var logits;
  Var probs;
  Var age;
};

/// p = softmax(g / tau), age = sum_b bins[b] * p[b], g = W h + b.
AgeHeadResult age_expectation_head(Binding& bind, Param& w, Param& b, const Var& h,
                                   const std::vector<double>& bins, double tau);

class Model {
public:
  Model(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  std::size_t token_count() const { return n_tokens_; }
  std::size_t depth() const { return blocks_.size(); }
  Block& block(std::size_t i) { return blocks_[i]; }
  const Block& block(std::size_t i) const { return blocks_[i]; }

  /// Patch embeddings (or raw tokens) + positional encodings, CLS prepended.
  Var tokenize(Binding& bind, const Sample& sample);

  ForwardResult forward(Binding& bind, const Sample& sample,
                        const ForwardOptions& opt = {});

  /// Deterministic parameter order; checkpoint and optimizer layout follow it.
  void collect_params(std::vector<Param*>& out);

  void reorthogonalize();
  double max_expert_penalty() const;
  Var ortho_penalty_total(Binding& bind);
  double ortho_penalty_total_value() const;

private:
  ModelConfig cfg_;
  std::size_t n_tokens_ = 0;
  Param cls_, pos_;
  Param proj_w_, proj_b_;  // image/volume patch projection
  std::vector<Block> blocks_;
  Param head_w_, head_b_;
};

/// Extracts non-overlapping patches as a constant [n_patches, patch_volume]
/// matrix, row-major within each patch.
Tensor extract_patches(const Tensor& input, const InputConfig& cfg);

}  // namespace ermoe
