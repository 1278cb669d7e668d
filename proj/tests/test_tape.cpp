// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <functional>
#include <vector>

#include "ermoe/errors.hpp"
#include "ermoe/tape.hpp"
#include "support.hpp"

using namespace ermoe;
using testsupport::finite_difference;
using testsupport::max_abs_diff;
using testsupport::max_rel_err;

namespace {

using Builder = std::function<Var(GradTape&, std::vector<Var>&)>;

// Checks the analytic vector-Jacobian product of one composite against
// central finite differences, probing through a fixed random cotangent.
void check_vjp(const Builder& build, std::vector<Tensor> inputs, double tol = 1e-6) {
  GradTape tape;
  std::vector<Var> leaves;
  for (const Tensor& x : inputs) leaves.push_back(tape.leaf(x));
  Var y = build(tape, leaves);
  Rng wr(4242);
  const Tensor w = wr.normal_tensor(y.value().shape());
  Var s = dot_const(y, w);
  tape.backward(s);

  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Tensor analytic = tape.grad(leaves[i]);
    auto scalar_fn = [&](const Tensor& xi) {
      std::vector<Tensor> probe = inputs;
      probe[i] = xi;
      GradTape t2;
      std::vector<Var> l2;
      for (const Tensor& x : probe) l2.push_back(t2.leaf(x));
      Var y2 = build(t2, l2);
      double acc = 0.0;
      for (std::size_t j = 0; j < w.size(); ++j) acc += y2.value().at(j) * w.at(j);
      return acc;
    };
    const Tensor numeric = finite_difference(scalar_fn, inputs[i]);
    CHECK(max_rel_err(analytic, numeric) < tol);
  }
}

}  // namespace

TEST_CASE("backward: quadratic loss gradient is x") {
  GradTape t;
  Tensor x0(Shape{3}, {1.5, -2.0, 0.5});
  Var x = t.leaf(x0);
  Var loss = scale(frobenius_sq(x), 0.5);  // 1/2 ||x||^2
  t.backward(loss);
  CHECK(max_abs_diff(t.grad(x), x0) == 0.0);
}

TEST_CASE("backward: constant loss leaves zero grads") {
  GradTape t;
  Var x = t.leaf(Tensor(Shape{4}, {1, 2, 3, 4}));
  Var c = t.leaf(Tensor::scalar(3.0));
  t.backward(c);
  const Tensor& g = t.grad(x);
  for (std::size_t i = 0; i < 4; ++i) CHECK(g.at(i) == 0.0);
}

TEST_CASE("backward: non-scalar root rejected") {
  GradTape t;
  Var x = t.leaf(Tensor(Shape{2}, {1, 2}));
  CHECK_THROWS_AS(t.backward(x), ContractError);
}

TEST_CASE("backward: diamond dependency accumulates once per node") {
  // y = (x*x) * (x*x*x); dy/dx = 5 x^4
  GradTape t;
  Var x = t.leaf(Tensor::scalar(1.3));
  Var a = mul(x, x);
  Var b = mul(a, x);
  Var y = mul(a, b);
  t.backward(y);
  CHECK(t.grad(x).item() == doctest::Approx(5.0 * std::pow(1.3, 4)).epsilon(1e-12));
}

TEST_CASE("vjp of every primitive matches finite differences") {
  Rng rng(7);
  const Tensor a23 = rng.normal_tensor(Shape{2, 3});
  const Tensor b23 = rng.normal_tensor(Shape{2, 3});
  const Tensor m34 = rng.normal_tensor(Shape{3, 4});
  const Tensor v3 = rng.normal_tensor(Shape{3});
  const Tensor u3 = rng.normal_tensor(Shape{3});
  const Tensor v4 = rng.normal_tensor(Shape{4});
  const Tensor s0 = Tensor::scalar(0.7);

  SUBCASE("add") {
    check_vjp([](GradTape&, std::vector<Var>& l) { return add(l[0], l[1]); }, {a23, b23});
  }
  SUBCASE("sub") {
    check_vjp([](GradTape&, std::vector<Var>& l) { return sub(l[0], l[1]); }, {a23, b23});
  }
  SUBCASE("mul") {
    check_vjp([](GradTape&, std::vector<Var>& l) { return mul(l[0], l[1]); }, {a23, b23});
  }
  SUBCASE("neg/scale") {
    check_vjp([](GradTape&, std::vector<Var>& l) { return scale(neg(l[0]), 2.5); }, {a23});
  }
  SUBCASE("square") {
    check_vjp([](GradTape&, std::vector<Var>& l) { return square(l[0]); }, {a23});
  }
  SUBCASE("abs") {
    check_vjp([](GradTape&, std::vector<Var>& l) { return abs_val(l[0]); }, {a23});
  }
  SUBCASE("relu") {
    check_vjp([](GradTape&, std::vector<Var>& l) { return relu(l[0]); }, {a23});
  }
  SUBCASE("gelu") {
    check_vjp([](GradTape&, std::vector<Var>& l) { return gelu_op(l[0]); }, {a23});
  }
  SUBCASE("sum/mean") {
    check_vjp([](GradTape&, std::vector<Var>& l) { return mean(l[0]); }, {a23});
  }
  SUBCASE("dot") {
    check_vjp([](GradTape&, std::vector<Var>& l) { return dot(l[0], l[1]); }, {v3, u3});
  }
  SUBCASE("matmul 2d x 2d") {
    check_vjp([](GradTape&, std::vector<Var>& l) { return matmul(l[0], l[1]); }, {a23, m34});
  }
  SUBCASE("matmul 2d x 1d") {
    check_vjp([](GradTape&, std::vector<Var>& l) { return matmul(l[0], l[1]); }, {a23, v3});
  }
  SUBCASE("transpose") {
    check_vjp([](GradTape&, std::vector<Var>& l) { return transpose(l[0]); }, {a23});
  }
  SUBCASE("row") {
    check_vjp([](GradTape&, std::vector<Var>& l) { return row(l[0], 1); }, {a23});
  }
  SUBCASE("slice_cols") {
    check_vjp([](GradTape&, std::vector<Var>& l) { return slice_cols(l[0], 1, 3); }, {m34});
  }
  SUBCASE("gather_cols") {
    check_vjp([](GradTape&, std::vector<Var>& l) { return gather_cols(l[0], {3, 0, 2}); },
              {m34});
  }
  SUBCASE("concat_rows") {
    check_vjp(
        [](GradTape&, std::vector<Var>& l) {
          return concat_rows({l[0], l[1]});
        },
        {v3, u3});
  }
  SUBCASE("concat_cols") {
    check_vjp(
        [](GradTape&, std::vector<Var>& l) {
          return concat_cols({l[0], l[1]});
        },
        {a23, b23});
  }
  SUBCASE("concat_scalars") {
    check_vjp(
        [](GradTape&, std::vector<Var>& l) {
          return concat_scalars({sum(l[0]), sum(l[1])});
        },
        {v3, u3});
  }
  SUBCASE("add_rowvec") {
    check_vjp([](GradTape&, std::vector<Var>& l) { return add_rowvec(l[0], l[1]); },
              {a23, v3});
  }
  SUBCASE("col_scale") {
    check_vjp([](GradTape&, std::vector<Var>& l) { return col_scale(l[0], l[1]); },
              {a23, v3});
  }
  SUBCASE("mul_scalar") {
    check_vjp(
        [](GradTape& t, std::vector<Var>& l) {
          (void)t;
          return mul_scalar(l[0], l[1]);
        },
        {v3, s0});
  }
  SUBCASE("div_scalar") {
    check_vjp([](GradTape&, std::vector<Var>& l) { return div_scalar(l[0], l[1]); },
              {v3, s0});
  }
  SUBCASE("l2_normalize") {
    check_vjp([](GradTape&, std::vector<Var>& l) { return l2_normalize(l[0]); }, {v3});
  }
  SUBCASE("cosine") {
    check_vjp([](GradTape&, std::vector<Var>& l) { return cosine(l[0], l[1]).score; },
              {v3, u3});
  }
  SUBCASE("softmax") {
    check_vjp([](GradTape&, std::vector<Var>& l) { return softmax(l[0], 0.8); }, {v4});
  }
  SUBCASE("row_softmax") {
    check_vjp([](GradTape&, std::vector<Var>& l) { return row_softmax(l[0], 1.3); }, {m34});
  }
  SUBCASE("log_softmax") {
    check_vjp([](GradTape&, std::vector<Var>& l) { return log_softmax(l[0]); }, {v4});
  }
  SUBCASE("frobenius_sq") {
    check_vjp([](GradTape&, std::vector<Var>& l) { return frobenius_sq(l[0]); }, {a23});
  }
  SUBCASE("dot_const") {
    Tensor c = Rng(5).normal_tensor(Shape{3});
    check_vjp([c](GradTape&, std::vector<Var>& l) { return dot_const(l[0], c); }, {v3});
  }
}

TEST_CASE("l2_normalize below-eps branch is linear") {
  GradTape t;
  Tensor tiny(Shape{2}, {1e-14, -2e-14});
  Var x = t.leaf(tiny);
  Var y = l2_normalize(x, 1e-12);
  Var s = sum(y);
  t.backward(s);
  CHECK(t.grad(x).at(0) == doctest::Approx(1e12).epsilon(1e-12));
}

TEST_CASE("cosine degenerate input has no gradient path") {
  GradTape t;
  Var u = t.leaf(Tensor(Shape{3}));
  Var v = t.leaf(Tensor(Shape{3}, {1, 2, 3}));
  auto c = cosine(u, v);
  CHECK(c.degenerate);
  t.backward(c.score);
  CHECK(max_abs_diff(t.grad(v), Tensor(Shape{3})) == 0.0);
}

TEST_CASE("grad of untouched leaf is zero-shaped") {
  GradTape t;
  Var x = t.leaf(Tensor(Shape{2, 2}, {1, 2, 3, 4}));
  Var y = t.leaf(Tensor::scalar(1.0));
  Var loss = mul(y, y);
  t.backward(loss);
  CHECK(t.grad(x).same_shape(x.value()));
  CHECK(max_abs_diff(t.grad(x), Tensor(Shape{2, 2})) == 0.0);
}
