// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ermoe/backbone.hpp"

namespace ermoe {

using Dataset = std::vector<Sample>;

/// total = task + lambda * ortho, bit-level. For the logit-router arm the
/// auxiliary balance term folds into `task` (it is part of that arm's
/// objective); `data` and `lbl` break it out for reporting.
struct LossBreakdown {
  double task = 0.0;
  double ortho = 0.0;
  double total = 0.0;
  double lambda = 0.0;
  double data = 0.0;  // task minus auxiliary terms
  double lbl = 0.0;
};

/// Usage/fallback counters pooled over (layer, expert) slots.
struct RoutingStats {
  std::size_t layers = 0, experts = 0;
  std::size_t decisions = 0;  // one per routed token per layer
  std::size_t full = 0, partial = 0;
  std::vector<std::size_t> usage;  // [layer * experts + e]

  void init(std::size_t num_layers, std::size_t num_experts);
  void absorb(const std::vector<BlockTrace>& trace);
  double fallback_rate() const;
  double usage_entropy() const;  // nats over pooled layer-expert slots
};

struct BatchOptions {
  bool with_grads = true;
  double label_smoothing = 0.1;
  double beta_lbl = 0.0;
  int forced_expert = -1;
  const RouterConfig* router_override = nullptr;
  RoutingStats* stats = nullptr;
  // When set, receives [sample][block][token] decisions.
  std::vector<std::vector<std::vector<RoutingDecision>>>* decisions = nullptr;
};

/// Mean task loss over the batch plus the orthogonality term summed over
/// every expert in every block. With `with_grads`, gradients accumulate into
/// Param::grad (callers zero them first).
LossBreakdown run_batch(Model& model, const std::vector<const Sample*>& batch,
                        const BatchOptions& opt);

LossBreakdown total_loss(Model& model, const std::vector<const Sample*>& batch,
                         double label_smoothing = 0.1, double beta_lbl = 0.0);

// ---------------------------------------------------------------------------

struct OptimizerConfig {
  double base_lr = 1e-4;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 1;  // cosine horizon (annealed to zero)
};

/// AdamW with decoupled weight decay, linear warmup and cosine decay to zero.
class AdamW {
public:
  AdamW(std::vector<Param*> params, OptimizerConfig cfg);

  /// Learning rate of 1-indexed step t. During warmup lr = base * t / warmup;
  /// afterwards cosine from base to zero at total_steps.
  double lr_at(std::size_t t) const;

  /// Applies one update from the accumulated Param::grad values; throws
  /// TrainingError naming the parameter on non-finite gradients.
  void step();
  void step_with_lr(double lr);

  std::size_t step_count() const { return t_; }

private:
  std::vector<Param*> params_;
  std::vector<Tensor> m_, v_;
  OptimizerConfig cfg_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------

struct TrainParams {
  std::size_t epochs = 1;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  double base_lr = 0.0;  // 0 selects the lr = 1e-4 * bs/256 scaling rule
  double weight_decay = 0.05;
  std::size_t warmup_epochs = 5;
  double label_smoothing = 0.1;
  std::size_t reorth_interval = 100;
  std::size_t warmtie_steps = 0;  // pre-training of region experts
  double beta_lbl = 0.0;

  double resolved_lr() const {
    return base_lr > 0.0 ? base_lr : 1e-4 * static_cast<double>(batch_size) / 256.0;
  }
};

struct EpochMetrics {
  std::size_t epoch = 0;
  std::size_t step = 0;  // cumulative optimizer steps
  double lr = 0.0;
  double task_loss = 0.0;
  double ortho_loss = 0.0;
  double fallback_rate = 0.0;
  double usage_entropy = 0.0;
};

struct EvalResult {
  double loss = 0.0;    // unsmoothed task loss
  double metric = 0.0;  // accuracy (classifier) or MAE (age head)
};

struct TrainResult {
  std::vector<EpochMetrics> epochs;
  EvalResult validation;
  double max_drift = 0.0;  // max expert penalty observed before re-orthogonalization
};

class Trainer {
public:
  Trainer(Model& model, TrainParams params);

  TrainResult train(const Dataset& train_set, const Dataset& val_set);

  static EvalResult evaluate(Model& model, const Dataset& data);

private:
  Model& model_;
  TrainParams params_;
};

// ---------------------------------------------------------------------------

struct GradCheckOptions {
  double h = 1e-5;
  double label_smoothing = 0.1;
  double denom_floor = 1e-2;  // coordinates below this compare absolutely
  int corrupt_param = -1;     // test fixture: scale one analytic grad
  double corrupt_factor = 1.5;
};

struct GradCheckReport {
  struct Group {
    std::string name;
    double max_rel_err = 0.0;
    std::string worst_param;
    std::size_t coords = 0;
  };
  std::vector<Group> groups;
  double max_rel_err = 0.0;
  std::string worst_param;
  std::size_t total_coords = 0;
};

/// Central-difference verification of the full training gradient,
/// parameter group by parameter group.
GradCheckReport gradcheck(Model& model, const std::vector<const Sample*>& batch,
                          const GradCheckOptions& opt = {});

// ---------------------------------------------------------------------------

struct LambdaSweepRow {
  double lambda = 0.0;
  double val_loss = 0.0;
  double val_metric = 0.0;
};

/// Trains one fresh model per lambda (matched seeds) and reports final
/// validation task loss.
std::vector<LambdaSweepRow> lambda_sweep(const ModelConfig& base_cfg,
                                         const TrainParams& params,
                                         const Dataset& train_set, const Dataset& val_set,
                                         const std::vector<double>& lambdas);

}  // namespace ermoe
