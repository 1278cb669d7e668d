// SPDX-License-Identifier: Apache-2.0
#include "ermoe/backbone.hpp"

#include <cmath>

#include "ermoe/errors.hpp"
#include "ermoe/linalg.hpp"

namespace ermoe {

std::size_t InputConfig::patch_volume() const {
  switch (kind) {
    case Kind::Tokens: return 0;
    case Kind::Image: return patch * patch * channels;
    case Kind::Volume: return patch * patch * patch * channels;
  }
  return 0;
}

std::size_t InputConfig::patch_count() const {
  if (kind == Kind::Tokens) return tokens_per_sample;
  if (patch == 0) throw ConfigError("patch size must be positive");
  if (height % patch || width % patch)
    throw DimensionError("input dims must be divisible by the patch size");
  std::size_t n = (height / patch) * (width / patch);
  if (kind == Kind::Volume) {
    if (depth % patch)
      throw DimensionError("input dims must be divisible by the patch size");
    n *= depth / patch;
  }
  return n;
}

void ModelConfig::resolve() {
  if (d == 0 || depth == 0 || heads == 0 || num_experts == 0)
    throw ConfigError("model dims must be positive");
  if (d % heads != 0) throw ConfigError("d must be divisible by heads");
  if (router.routing_rank == 0) router.routing_rank = std::max<std::size_t>(1, d / 4);
  if (router.routing_rank > d) throw ConfigError("routing rank exceeds d");
  router.validate(num_experts);
  if (num_region_experts > num_experts)
    throw ConfigError("more region experts than experts");
  if (expert_layers != 1 && expert_layers != 2)
    throw ConfigError("expert_layers must be 1 or 2");
  if (head.kind == HeadKind::Classifier) {
    if (head.num_classes == 0) throw ConfigError("classifier head needs num_classes");
  } else {
    if (head.bins.empty()) throw ConfigError("age head needs bins");
    if (head.tau <= 0.0) throw ConfigError("age head temperature must be positive");
  }
  if (input.kind == InputConfig::Kind::Tokens) {
    if (input.tokens_per_sample == 0) throw ConfigError("tokens_per_sample must be positive");
  } else {
    (void)input.patch_count();  // validates divisibility
  }
}

AttentionParams::AttentionParams(const std::string& name, std::size_t d, Rng& rng)
    : wq(name + ".wq", "attention", rng.normal_tensor(Shape{d, d}, 0.02)),
      wk(name + ".wk", "attention", rng.normal_tensor(Shape{d, d}, 0.02)),
      wv(name + ".wv", "attention", rng.normal_tensor(Shape{d, d}, 0.02)),
      wo(name + ".wo", "attention", rng.normal_tensor(Shape{d, d}, 0.02)),
      bq(name + ".bq", "attention", Tensor(Shape{d})),
      bk(name + ".bk", "attention", Tensor(Shape{d})),
      bv(name + ".bv", "attention", Tensor(Shape{d})),
      bo(name + ".bo", "attention", Tensor(Shape{d})) {}

void AttentionParams::collect(std::vector<Param*>& out) {
  for (Param* p : {&wq, &wk, &wv, &wo, &bq, &bk, &bv, &bo}) out.push_back(p);
}

AttentionOutput attention_block(Binding& bind, AttentionParams& p, const Var& tokens,
                                std::size_t heads) {
  const std::size_t d = tokens.value().dim(1);
  if (heads == 0 || d % heads) throw ConfigError("d must be divisible by heads");
  const std::size_t dh = d / heads;

  Var q = add_rowvec(matmul(tokens, bind(p.wq)), bind(p.bq));
  Var k = add_rowvec(matmul(tokens, bind(p.wk)), bind(p.bk));
  Var v = add_rowvec(matmul(tokens, bind(p.wv)), bind(p.bv));

  std::vector<Var> head_outs;
  Var alpha_sum;
  for (std::size_t h = 0; h < heads; ++h) {
    Var qh = slice_cols(q, h * dh, (h + 1) * dh);
    Var kh = slice_cols(k, h * dh, (h + 1) * dh);
    Var vh = slice_cols(v, h * dh, (h + 1) * dh);
    Var logits = scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(double(dh)));
    Var a = row_softmax(logits);
    head_outs.push_back(matmul(a, vh));
    alpha_sum = alpha_sum.valid() ? add(alpha_sum, a) : a;
  }
  Var merged = heads == 1 ? head_outs[0] : concat_cols(head_outs);
  Var out = add_rowvec(matmul(merged, bind(p.wo)), bind(p.bo));

  AttentionOutput res;
  res.z = add(tokens, out);
  res.alpha = scale(alpha_sum, 1.0 / double(heads));
  return res;
}

AgeHeadResult age_expectation_head(Binding& bind, Param& w, Param& b, const Var& h,
                                   const std::vector<double>& bins, double tau) {
  if (tau <= 0.0) throw ConfigError("age head temperature must be positive");
  if (bins.empty()) throw ConfigError("age head needs at least one bin");
  if (w.value.dim(0) != bins.size())
    throw DimensionError("age head: weight rows must match bin count");
  AgeHeadResult res;
  res.logits = add(matmul(bind(w), h), bind(b));
  res.probs = softmax(res.logits, tau);
  res.age = dot_const(res.probs, Tensor(Shape{bins.size()},
                                        std::vector<double>(bins.begin(), bins.end())));
  return res;
}

Tensor extract_patches(const Tensor& input, const InputConfig& cfg) {
  const std::size_t p = cfg.patch, c = cfg.channels;
  const std::size_t n = cfg.patch_count(), vol = cfg.patch_volume();
  Tensor out(Shape{n, vol});
  if (cfg.kind == InputConfig::Kind::Image) {
    if (input.rank() != 3 || input.dim(0) != cfg.height || input.dim(1) != cfg.width ||
        input.dim(2) != c)
      throw DimensionError("image shape does not match the input config");
    const std::size_t pw = cfg.width / p;
    for (std::size_t py = 0; py < cfg.height / p; ++py)
      for (std::size_t px = 0; px < pw; ++px) {
        const std::size_t row_idx = py * pw + px;
        std::size_t off = 0;
        for (std::size_t y = 0; y < p; ++y)
          for (std::size_t x = 0; x < p; ++x)
            for (std::size_t ch = 0; ch < c; ++ch)
              out.at2(row_idx, off++) =
                  input.at(((py * p + y) * cfg.width + (px * p + x)) * c + ch);
      }
  } else if (cfg.kind == InputConfig::Kind::Volume) {
    if (input.rank() != 4 || input.dim(0) != cfg.height || input.dim(1) != cfg.width ||
        input.dim(2) != cfg.depth || input.dim(3) != c)
      throw DimensionError("volume shape does not match the input config");
    const std::size_t pw = cfg.width / p, pd = cfg.depth / p;
    for (std::size_t py = 0; py < cfg.height / p; ++py)
      for (std::size_t px = 0; px < pw; ++px)
        for (std::size_t pz = 0; pz < pd; ++pz) {
          const std::size_t row_idx = (py * pw + px) * pd + pz;
          std::size_t off = 0;
          for (std::size_t y = 0; y < p; ++y)
            for (std::size_t x = 0; x < p; ++x)
              for (std::size_t z = 0; z < p; ++z)
                for (std::size_t ch = 0; ch < c; ++ch)
                  out.at2(row_idx, off++) =
                      input.at((((py * p + y) * cfg.width + (px * p + x)) * cfg.depth +
                                (pz * p + z)) * c + ch);
        }
  } else {
    throw ConfigError("extract_patches: token inputs carry no patches");
  }
  return out;
}

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.resolve();
  Rng rng(seed);
  n_tokens_ = cfg_.input.patch_count() + 1;

  cls_ = Param("embed.cls", "tokenizer", rng.normal_tensor(Shape{cfg_.d}, 0.02));
  pos_ = Param("embed.pos", "tokenizer",
               rng.normal_tensor(Shape{n_tokens_, cfg_.d}, 0.02));
  if (cfg_.input.kind != InputConfig::Kind::Tokens) {
    proj_w_ = Param("embed.proj_w", "tokenizer",
                    rng.normal_tensor(Shape{cfg_.input.patch_volume(), cfg_.d}, 0.02));
    proj_b_ = Param("embed.proj_b", "tokenizer", Tensor(Shape{cfg_.d}));
  }

  for (std::size_t b = 0; b < cfg_.depth; ++b) {
    const std::string name = "block" + std::to_string(b);
    Block blk;
    blk.attn = AttentionParams(name + ".attn", cfg_.d, rng);
    blk.gate = cfg_.gate;
    if (cfg_.gate == GateKind::Eigenbasis) {
      blk.bank = ExpertBank(name, cfg_.num_experts, cfg_.d, cfg_.router.routing_rank,
                            cfg_.nonlinearity, cfg_.expert_layers, rng,
                            cfg_.num_region_experts);
      if (cfg_.router.score_target == ScoreTarget::LearnedVector) {
        for (std::size_t e = 0; e < blk.bank.size(); ++e)
          blk.bank[e].learned_target(rng);
      }
    } else {
      blk.logit_router = LogitRouter(name + ".router", cfg_.num_experts, cfg_.d,
                                     cfg_.router.k, 0.0, rng);
      for (std::size_t e = 0; e < cfg_.num_experts; ++e)
        blk.dense_experts.emplace_back(name + ".expert" + std::to_string(e), cfg_.d,
                                       cfg_.nonlinearity, rng);
    }
    blocks_.push_back(std::move(blk));
  }

  const std::size_t out_dim = cfg_.head.kind == HeadKind::Classifier
                                  ? cfg_.head.num_classes
                                  : cfg_.head.bins.size();
  head_w_ = Param("head.w", "head", rng.normal_tensor(Shape{out_dim, cfg_.d}, 0.02));
  head_b_ = Param("head.b", "head", Tensor(Shape{out_dim}));
}

Var Model::tokenize(Binding& bind, const Sample& sample) {
  GradTape& tape = bind.tape();
  std::vector<Var> rows;
  rows.push_back(bind(cls_));
  if (cfg_.input.kind == InputConfig::Kind::Tokens) {
    if (sample.input.rank() != 2 || sample.input.dim(0) != cfg_.input.tokens_per_sample ||
        sample.input.dim(1) != cfg_.d)
      throw DimensionError("token sample must be [" +
                           std::to_string(cfg_.input.tokens_per_sample) + "," +
                           std::to_string(cfg_.d) + "]");
    Var x = tape.leaf(sample.input);
    for (std::size_t i = 0; i < cfg_.input.tokens_per_sample; ++i)
      rows.push_back(row(x, i));
  } else {
    Var patches = tape.leaf(extract_patches(sample.input, cfg_.input));
    Var proj = add_rowvec(matmul(patches, bind(proj_w_)), bind(proj_b_));
    for (std::size_t i = 0; i < cfg_.input.patch_count(); ++i)
      rows.push_back(row(proj, i));
  }
  return add(concat_rows(rows), bind(pos_));
}

namespace {

Var moe_block_forward(Binding& bind, Block& blk, const Var& tokens,
                      const ModelConfig& cfg, const ForwardOptions& opt,
                      BlockTrace* trace) {
  AttentionOutput att = attention_block(bind, blk.attn, tokens, cfg.heads);
  if (trace) trace->alpha = att.alpha.value();
  const std::size_t n = tokens.value().dim(0);
  // All contexts at once: row i of alpha * z is Eq-style sum_j alpha_ij z_j.
  Var contexts = matmul(att.alpha, att.z);

  const RouterConfig& rc = opt.router_override ? *opt.router_override : cfg.router;
  std::vector<Var> out_rows;
  out_rows.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Var xi = cfg.score_input == ScoreInput::PreAttention ? row(tokens, i) : row(att.z, i);
    Var zi = row(att.z, i);
    Var yi;
    if (blk.gate == GateKind::Eigenbasis) {
      if (opt.forced_expert >= 0) {
        yi = blk.bank[static_cast<std::size_t>(opt.forced_expert)].forward(bind, xi);
        if (trace) {
          RoutingDecision dec;
          dec.scores.assign(blk.bank.size(), 0.0);
          dec.selected = {static_cast<std::size_t>(opt.forced_expert)};
          dec.weights = {1.0};
          trace->decisions.push_back(std::move(dec));
        }
      } else {
        RouteResult rr = route_token(bind, xi, row(contexts, i), blk.bank, rc);
        yi = rr.output;
        if (trace) trace->decisions.push_back(std::move(rr.decision));
      }
    } else {
      LogitRouteResult lr = logit_route(bind, blk.logit_router, xi);
      std::vector<Var> outs;
      for (std::size_t e : lr.decision.selected)
        outs.push_back(blk.dense_experts[e].forward(bind, xi));
      yi = fuse(lr.weight_vars, outs);
      if (trace) {
        RoutingDecision dec;
        dec.scores = lr.decision.probs;  // gate probabilities stand in for scores
        dec.eligible = lr.decision.selected;
        dec.selected = lr.decision.selected;
        dec.weights = lr.decision.weights;
        trace->decisions.push_back(std::move(dec));
        trace->logit_decisions.push_back(std::move(lr.decision));
        trace->prob_vars.push_back(lr.probs);
      }
    }
    out_rows.push_back(add(zi, yi));
  }
  return concat_rows(out_rows);
}

}  // namespace

ForwardResult Model::forward(Binding& bind, const Sample& sample,
                             const ForwardOptions& opt) {
  ForwardResult res;
  Var x = tokenize(bind, sample);
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    BlockTrace trace;
    x = moe_block_forward(bind, blocks_[b], x, cfg_, opt,
                          opt.record_trace ? &trace : nullptr);
    if (opt.record_trace) res.trace.push_back(std::move(trace));
  }
  res.cls = row(x, 0);
  if (cfg_.head.kind == HeadKind::Classifier) {
    res.logits = add(matmul(bind(head_w_), res.cls), bind(head_b_));
  } else {
    AgeHeadResult age =
        age_expectation_head(bind, head_w_, head_b_, res.cls, cfg_.head.bins, cfg_.head.tau);
    res.logits = age.logits;
    res.probs = age.probs;
    res.age = age.age;
  }
  return res;
}

void Model::collect_params(std::vector<Param*>& out) {
  out.push_back(&cls_);
  out.push_back(&pos_);
  if (cfg_.input.kind != InputConfig::Kind::Tokens) {
    out.push_back(&proj_w_);
    out.push_back(&proj_b_);
  }
  for (Block& b : blocks_) {
    b.attn.collect(out);
    if (b.gate == GateKind::Eigenbasis) {
      b.bank.collect_params(out);
    } else {
      out.push_back(&b.logit_router.gate);
      for (DenseExpert& e : b.dense_experts) {
        out.push_back(&e.w);
        out.push_back(&e.b);
      }
    }
  }
  out.push_back(&head_w_);
  out.push_back(&head_b_);
}

void Model::reorthogonalize() {
  for (Block& b : blocks_)
    if (b.gate == GateKind::Eigenbasis) b.bank.reorthogonalize_all();
}

double Model::max_expert_penalty() const {
  double m = 0.0;
  for (const Block& b : blocks_)
    if (b.gate == GateKind::Eigenbasis)
      m = std::max(m, b.bank.max_ortho_penalty());
  return m;
}

Var Model::ortho_penalty_total(Binding& bind) {
  Var total;
  for (Block& b : blocks_) {
    if (b.gate != GateKind::Eigenbasis) continue;
    for (std::size_t e = 0; e < b.bank.size(); ++e) {
      Var pen = b.bank[e].ortho_penalty(bind);
      total = total.valid() ? add(total, pen) : pen;
    }
  }
  if (!total.valid()) total = bind.tape().leaf(Tensor::scalar(0.0));
  return total;
}

double Model::ortho_penalty_total_value() const {
  double total = 0.0;
  for (const Block& b : blocks_) {
    if (b.gate != GateKind::Eigenbasis) continue;
    for (std::size_t e = 0; e < b.bank.size(); ++e)
      total += b.bank[e].ortho_penalty_value();
  }
  return total;
}

}  // namespace ermoe
