// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cstring>

#include "ermoe/errors.hpp"
#include "ermoe/linalg.hpp"
#include "ermoe/router.hpp"
#include "support.hpp"

using namespace ermoe;
using testsupport::max_abs_diff;
using testsupport::random_orthonormal;

namespace {

ExpertBank make_bank(std::uint64_t seed, std::size_t E, std::size_t d, std::size_t r,
                     Nonlinearity nl = Nonlinearity::Gelu) {
  Rng rng(seed);
  return ExpertBank("b", E, d, r, nl, 1, rng);
}

RouterConfig cfg_of(std::size_t k, double T, std::size_t r = 0) {
  RouterConfig c;
  c.k = k;
  c.threshold = T;
  c.routing_rank = r;
  return c;
}

}  // namespace

TEST_CASE("context_vector one-hot picks the row") {
  Rng rng(1);
  Tensor z = rng.normal_tensor(Shape{4, 3});
  Tensor alpha(Shape{4}, {0, 0, 1, 0});
  Tensor c = context_vector(alpha, z);
  for (std::size_t j = 0; j < 3; ++j) CHECK(c.at(j) == z.at2(2, j));
}

TEST_CASE("context_vector uniform over two tokens is the row mean") {
  Tensor z(Shape{2, 2}, {1, 3, 5, 7});
  Tensor alpha(Shape{2}, {0.5, 0.5});
  Tensor c = context_vector(alpha, z);
  CHECK(c.at(0) == doctest::Approx(3.0));
  CHECK(c.at(1) == doctest::Approx(5.0));
}

TEST_CASE("context_vector matches explicit-loop oracle") {
  Rng rng(2);
  Tensor z = rng.normal_tensor(Shape{6, 4});
  Tensor raw(Shape{6});
  for (std::size_t i = 0; i < 6; ++i) raw.at(i) = rng.uniform(0.0, 1.0);
  double s = 0.0;
  for (std::size_t i = 0; i < 6; ++i) s += raw.at(i);
  for (std::size_t i = 0; i < 6; ++i) raw.at(i) /= s;

  Tensor expect(Shape{4});
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 4; ++j) expect.at(j) += raw.at(i) * z.at2(i, j);
  CHECK(max_abs_diff(context_vector(raw, z), expect) < 1e-12);
}

TEST_CASE("context_vector rejects bad attention rows") {
  Tensor z(Shape{2, 2}, {1, 2, 3, 4});
  CHECK_THROWS_AS(context_vector(Tensor(Shape{2}, {-0.1, 1.1}), z), ContractError);
  CHECK_THROWS_AS(context_vector(Tensor(Shape{2}, {0.7, 0.7}), z), ContractError);
}

TEST_CASE("eigenbasis_score: full rank with orthonormal U preserves the angle") {
  // Projection by a square orthonormal basis is a rotation, so the score must
  // equal cos(x, c) for every expert.
  Rng rng(3);
  ExpertBank bank = make_bank(4, 3, 6, 6);
  Tensor x = rng.normal_tensor(Shape{6});
  Tensor c = rng.normal_tensor(Shape{6});
  const double direct = cosine(x, c).value;
  for (std::size_t e = 0; e < 3; ++e) {
    double s = eigenbasis_score_value(bank[e], x, c, 6);
    CHECK(s == doctest::Approx(direct).epsilon(1e-12));
  }
}

TEST_CASE("eigenbasis_score: x == c scores 1") {
  Rng rng(5);
  ExpertBank bank = make_bank(6, 2, 8, 2);
  Tensor x = rng.normal_tensor(Shape{8});
  for (std::size_t e = 0; e < 2; ++e) {
    bool degen = false;
    double s = eigenbasis_score_value(bank[e], x, x, 2, &degen);
    if (!degen) CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("eigenbasis_score: zero projection is degenerate and scores 0") {
  // d=4, r=2, U=I, uniform |s| keeps identity order; x sits in the leading
  // plane, c outside it, so c's projection is the zero vector.
  Rng rng(7);
  ExpertBank bank = make_bank(8, 1, 4, 2);
  bank[0].layer(0).U.value = Tensor::identity(4);
  bank[0].layer(0).s.value = Tensor::full(Shape{4}, 1.0);
  Tensor x(Shape{4}, {1, 0, 0, 0});
  Tensor c(Shape{4}, {0, 0, 1, 0});
  bool degen = false;
  double s = eigenbasis_score_value(bank[0], x, c, 2, &degen);
  CHECK(degen);
  CHECK(s == 0.0);
}

TEST_CASE("eigenbasis_score: zero input is degenerate") {
  ExpertBank bank = make_bank(9, 1, 4, 2);
  bool degen = false;
  double s = eigenbasis_score_value(bank[0], Tensor(Shape{4}), Tensor(Shape{4}, {1, 0, 0, 0}),
                                    2, &degen);
  CHECK(degen);
  CHECK(s == 0.0);
}

TEST_CASE("select_experts spec cases") {
  SUBCASE("enough eligible: plain top-k") {
    auto sel = select_experts({0.9, 0.6, 0.4, 0.1}, cfg_of(2, 0.5));
    CHECK(sel.selected == std::vector<std::size_t>{0, 1});
    CHECK(sel.fallback == Fallback::None);
    CHECK(sel.eligible == std::vector<std::size_t>{0, 1});
  }
  SUBCASE("nothing eligible: full fallback to global top-k") {
    auto sel = select_experts({0.3, 0.2, 0.1, 0.05}, cfg_of(2, 0.5));
    CHECK(sel.selected == std::vector<std::size_t>{0, 1});
    CHECK(sel.fallback == Fallback::Full);
    CHECK(sel.eligible.empty());
  }
  SUBCASE("one eligible: partial fill") {
    auto sel = select_experts({0.7, 0.1, 0.1, 0.05}, cfg_of(2, 0.5));
    CHECK(sel.selected == std::vector<std::size_t>{0, 1});
    CHECK(sel.fallback == Fallback::Partial);
    CHECK(sel.eligible == std::vector<std::size_t>{0});
  }
  SUBCASE("ties break to the lower index") {
    auto sel = select_experts({0.6, 0.8, 0.8, 0.8}, cfg_of(2, 0.5));
    CHECK(sel.selected == std::vector<std::size_t>{1, 2});
  }
  SUBCASE("k > E rejected") {
    CHECK_THROWS_AS(select_experts({0.5, 0.5}, cfg_of(3, 0.5)), ConfigError);
  }
}

TEST_CASE("select_experts property: exactly min(k,E) distinct experts") {
  Rng rng(10);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t E = 2 + rng.uniform_index(6);
    const std::size_t k = 1 + rng.uniform_index(E);
    std::vector<double> scores(E);
    for (double& s : scores) s = rng.uniform(-1.0, 1.0);
    const double T = rng.uniform(0.0, 0.999);
    auto sel = select_experts(scores, cfg_of(k, T));
    CHECK(sel.selected.size() == k);
    auto sorted = sel.selected;
    std::sort(sorted.begin(), sorted.end());
    CHECK(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end());
    // Full fallback exactly when nothing clears the threshold.
    const bool any_eligible =
        std::any_of(scores.begin(), scores.end(), [&](double s) { return s >= T; });
    CHECK((sel.fallback == Fallback::Full) == !any_eligible);
    // Selected is sorted by descending score with lower-index ties.
    for (std::size_t i = 1; i < sel.selected.size(); ++i) {
      const double a = scores[sel.selected[i - 1]], b = scores[sel.selected[i]];
      CHECK((a > b || (a == b && sel.selected[i - 1] < sel.selected[i])));
    }
  }
}

TEST_CASE("mixture_weights spec cases") {
  auto near = [](const std::vector<double>& a, const std::vector<double>& b) {
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i)
      CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
  };
  near(mixture_weights({0.8, 0.2}), {0.8, 0.2});
  near(mixture_weights({0.6, 0.3}), {2.0 / 3.0, 1.0 / 3.0});
  near(mixture_weights({0.5, -0.2}), {1.0, 0.0});
  near(mixture_weights({-0.1, -0.3}), {0.5, 0.5});
}

TEST_CASE("mixture weight vars match plain values and sum to one") {
  Rng rng(11);
  for (int trial = 0; trial < 500; ++trial) {
    GradTape t;
    const std::size_t m = 1 + rng.uniform_index(4);
    std::vector<Var> sv;
    std::vector<double> plain;
    for (std::size_t i = 0; i < m; ++i) {
      const double s = rng.uniform(-1.0, 1.0);
      plain.push_back(s);
      sv.push_back(t.leaf(Tensor::scalar(s)));
    }
    auto wv = mixture_weights(t, sv);
    auto wp = mixture_weights(plain);
    double total = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      CHECK(wv[i].value().item() == wp[i]);
      CHECK(wp[i] >= 0.0);
      total += wp[i];
    }
    CHECK(std::abs(total - 1.0) < 1e-12);
  }
}

TEST_CASE("fuse") {
  Tensor a(Shape{2}, {2, 0});
  Tensor b(Shape{2}, {0, 2});
  Tensor y = fuse({0.5, 0.5}, {a, b});
  CHECK(y.at(0) == 1.0);
  CHECK(y.at(1) == 1.0);

  Tensor single = fuse({1.0}, {a});
  CHECK(max_abs_diff(single, a) == 0.0);

  Rng rng(12);
  std::vector<Tensor> outs;
  std::vector<double> ws = {0.2, 0.3, 0.5};
  for (int i = 0; i < 3; ++i) outs.push_back(rng.normal_tensor(Shape{4}));
  Tensor expect(Shape{4});
  for (std::size_t j = 0; j < 4; ++j)
    for (int i = 0; i < 3; ++i)
      expect.at(j) += ws[static_cast<std::size_t>(i)] * outs[static_cast<std::size_t>(i)].at(j);
  CHECK(max_abs_diff(fuse(ws, outs), expect) < 1e-12);

  CHECK_THROWS_AS(fuse({0.5}, {a, b}), DimensionError);
}

TEST_CASE("route_token with a single expert routes everything to it") {
  ExpertBank bank = make_bank(13, 1, 4, 2);
  Rng rng(14);
  Tensor x = rng.normal_tensor(Shape{4});
  Tensor c = rng.normal_tensor(Shape{4});
  GradTape t;
  Binding bind(t);
  auto res = route_token(bind, t.leaf(x), t.leaf(c), bank, cfg_of(1, 0.5));
  CHECK(res.decision.selected == std::vector<std::size_t>{0});
  CHECK(res.decision.weights == std::vector<double>{1.0});
  CHECK(max_abs_diff(res.output.value(), bank[0].forward_value(x)) < 1e-15);
}

TEST_CASE("route_token degenerate token: full fallback, uniform weights") {
  ExpertBank bank = make_bank(15, 4, 4, 2);
  GradTape t;
  Binding bind(t);
  auto res = route_token(bind, t.leaf(Tensor(Shape{4})), t.leaf(Tensor(Shape{4}, {1, 0, 0, 0})),
                         bank, cfg_of(2, 0.0));
  CHECK(res.decision.degenerate);
  CHECK(res.decision.fallback == Fallback::Full);
  CHECK(res.decision.selected == std::vector<std::size_t>{0, 1});
  CHECK(res.decision.weights[0] == 0.5);
  CHECK(res.decision.weights[1] == 0.5);
}

TEST_CASE("route_token matches the dense all-experts oracle on the selected set") {
  ExpertBank bank = make_bank(16, 4, 6, 2);
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x = rng.normal_tensor(Shape{6});
    Tensor c = rng.normal_tensor(Shape{6});
    GradTape t;
    Binding bind(t);
    auto res = route_token(bind, t.leaf(x), t.leaf(c), bank, cfg_of(2, 0.3));

    // Dense oracle: score every expert independently, pick/weight by hand,
    // combine plain forward values.
    std::vector<double> scores;
    for (std::size_t e = 0; e < 4; ++e)
      scores.push_back(eigenbasis_score_value(bank[e], x, c, 2));
    auto sel = select_experts(scores, cfg_of(2, 0.3));
    std::vector<double> sel_scores;
    std::vector<Tensor> outs;
    for (std::size_t e : sel.selected) {
      sel_scores.push_back(scores[e]);
      outs.push_back(bank[e].forward_value(x));
    }
    Tensor expect = fuse(mixture_weights(sel_scores), outs);
    CHECK(max_abs_diff(res.output.value(), expect) < 1e-12);
    CHECK(res.decision.selected == sel.selected);
  }
}

TEST_CASE("routing properties over random instances") {
  Rng rng(18);
  ExpertBank bank = make_bank(19, 5, 8, 2);
  int degenerate_seen = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    Tensor x = rng.normal_tensor(Shape{8}, std::exp(rng.uniform(-3, 3)));
    Tensor c = rng.normal_tensor(Shape{8}, std::exp(rng.uniform(-3, 3)));
    GradTape t;
    Binding bind(t);
    auto res = route_token(bind, t.leaf(x), t.leaf(c), bank,
                           cfg_of(1 + rng.uniform_index(3), rng.uniform(0.0, 0.9)));
    double wsum = 0.0;
    for (double s : res.decision.scores) {
      CHECK(s >= -1.0);
      CHECK(s <= 1.0);
    }
    for (double w : res.decision.weights) {
      CHECK(w >= 0.0);
      wsum += w;
    }
    CHECK(std::abs(wsum - 1.0) < 1e-12);
    if (res.decision.degenerate) ++degenerate_seen;
    // Negative-score selected experts carry zero weight unless the uniform
    // floor kicked in.
    bool all_nonpos = true;
    for (std::size_t i = 0; i < res.decision.selected.size(); ++i)
      if (res.decision.scores[res.decision.selected[i]] > 0.0) all_nonpos = false;
    if (!all_nonpos) {
      for (std::size_t i = 0; i < res.decision.selected.size(); ++i) {
        if (res.decision.scores[res.decision.selected[i]] < 0.0)
          CHECK(res.decision.weights[i] == 0.0);
      }
    }
  }
  (void)degenerate_seen;
}

TEST_CASE("fallback rate is monotone in T on fixed scores") {
  Rng rng(20);
  for (int batch = 0; batch < 20; ++batch) {
    std::vector<std::vector<double>> tokens;
    for (int i = 0; i < 64; ++i) {
      std::vector<double> s(6);
      for (double& v : s) v = rng.uniform(-1.0, 1.0);
      tokens.push_back(s);
    }
    double prev = -1.0;
    for (double T = 0.0; T < 0.95; T += 0.1) {
      int full = 0;
      for (auto& s : tokens) {
        if (select_experts(s, cfg_of(2, T)).fallback == Fallback::Full) ++full;
      }
      const double rate = double(full) / double(tokens.size());
      CHECK(rate >= prev);
      prev = rate;
    }
  }
}

TEST_CASE("routing is deterministic: identical inputs give identical decisions") {
  ExpertBank bank = make_bank(21, 4, 6, 2);
  Rng rng(22);
  Tensor x = rng.normal_tensor(Shape{6});
  Tensor c = rng.normal_tensor(Shape{6});
  auto run = [&]() {
    GradTape t;
    Binding bind(t);
    return route_token(bind, t.leaf(x), t.leaf(c), bank, cfg_of(2, 0.4));
  };
  auto a = run();
  auto b = run();
  CHECK(a.decision.selected == b.decision.selected);
  CHECK(a.decision.eligible == b.decision.eligible);
  CHECK(a.decision.fallback == b.decision.fallback);
  CHECK(std::memcmp(a.decision.scores.data(), b.decision.scores.data(),
                    sizeof(double) * a.decision.scores.size()) == 0);
  CHECK(std::memcmp(a.decision.weights.data(), b.decision.weights.data(),
                    sizeof(double) * a.decision.weights.size()) == 0);
  CHECK(std::memcmp(a.output.value().data().data(), b.output.value().data().data(),
                    sizeof(double) * a.output.value().size()) == 0);
}

TEST_CASE("full-rank degeneracy: square orthonormal bases give every expert the same score") {
  ExpertBank bank = make_bank(23, 6, 8, 8);
  Rng rng(24);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor x = rng.normal_tensor(Shape{8});
    Tensor c = rng.normal_tensor(Shape{8});
    std::vector<double> scores;
    for (std::size_t e = 0; e < 6; ++e)
      scores.push_back(eigenbasis_score_value(bank[e], x, c, 8));
    for (std::size_t e = 1; e < 6; ++e)
      CHECK(scores[e] == doctest::Approx(scores[0]).epsilon(1e-12));
  }
}

TEST_CASE("gradient flows through weights and expert outputs") {
  ExpertBank bank = make_bank(25, 3, 4, 2);
  Rng rng(26);
  Tensor x = rng.normal_tensor(Shape{4});
  Tensor c = rng.normal_tensor(Shape{4});
  GradTape t;
  Binding bind(t);
  auto res = route_token(bind, t.leaf(x), t.leaf(c), bank, cfg_of(2, 0.0));
  Var loss = frobenius_sq(res.output);
  t.backward(loss);
  // Selected experts' U must receive gradient through both the score path
  // and the forward path.
  double gnorm = 0.0;
  const Tensor& gu = t.grad(bind(bank[res.decision.selected[0]].layer(0).U));
  for (std::size_t i = 0; i < gu.size(); ++i) gnorm += gu.at(i) * gu.at(i);
  CHECK(gnorm > 0.0);
}
