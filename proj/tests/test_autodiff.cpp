// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <functional>

#include "doctest.h"
#include "gradcheck.hpp"
#include "helpers.hpp"
#include "leaf/autodiff.hpp"

using namespace leaf;
using namespace leaf::ad;
using leaf::testing::random_array;
using leaf::testing::random_away_from_zero;
using leaf::testing::OpCase;


TEST_CASE("every op matches central differences over 100 seeds") {
  for (const OpCase& c : leaf::testing::op_cases()) {
    CAPTURE(c.name);
    CHECK(leaf::testing::op_worst_error(c) < 1e-4);
  }
}

TEST_CASE("forward values on hand-computed cases") {
  Graph g;
  const NodeId a = g.input(DenseArray({2, 2}, {1, 2, 3, 4}));
  const NodeId b = g.input(DenseArray({2, 2}, {5, 6, 7, 8}));
  CHECK(g.value(g.matmul(a, b)) == DenseArray({2, 2}, {19, 22, 43, 50}));
  CHECK(g.value(g.transpose(a)) == DenseArray({2, 2}, {1, 3, 2, 4}));
  CHECK(g.value(g.add(a, g.constant(DenseArray::vector({10, 20})))) == DenseArray({2, 2}, {11, 22, 13, 24}));
  CHECK(g.value(g.mean(a))[0] == doctest::Approx(2.5));
  CHECK(g.value(g.sum(b))[0] == doctest::Approx(26.0));
  CHECK(g.value(g.relu(g.scale(a, -1.0)))[0] == 0.0);

  const NodeId sm = g.softmax_rows(g.constant(DenseArray({1, 2}, {0.0, std::log(3.0)})));
  CHECK(g.value(sm)[0] == doctest::Approx(0.25));
  CHECK(g.value(sm)[1] == doctest::Approx(0.75));

  const NodeId causal = g.softmax_rows(g.constant(DenseArray({2, 2}, {1, 100, 0, 0})), true);
  CHECK(g.value(causal).at(0, 0) == doctest::Approx(1.0));
  CHECK(g.value(causal).at(0, 1) == 0.0);
  CHECK(g.value(causal).at(1, 0) == doctest::Approx(0.5));

  const NodeId ln = g.layer_norm(g.constant(DenseArray({1, 2}, {1.0, 3.0})));
  CHECK(g.value(ln)[0] == doctest::Approx(-1.0).epsilon(1e-4));
  CHECK(g.value(ln)[1] == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("shape errors name the offending shapes") {
  Graph g;
  const NodeId a = g.input(DenseArray::matrix(2, 3));
  const NodeId b = g.input(DenseArray::matrix(2, 2));
  CHECK_THROWS_AS(g.matmul(a, b), ShapeError);
  try {
    g.add(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2, 3]") != std::string::npos);
    CHECK(msg.find("[2, 2]") != std::string::npos);
  }
  CHECK_THROWS_AS(g.slice_rows(a, 1, 3), ShapeError);
  CHECK_THROWS_AS(g.softmax_rows(a, true), ShapeError);
  const std::vector<std::size_t> bad{0, 2};
  CHECK_THROWS_AS(g.gather_rows(b, bad), ShapeError);
  CHECK_THROWS_AS(g.backward(a), ShapeError);
  CHECK_THROWS_AS(DenseArray({2, 2}, std::vector<double>{1.0}), ShapeError);
  CHECK_THROWS_AS(DenseArray(Shape{2, 2, 2, 2}), ShapeError);
}

TEST_CASE("non-finite values are rejected") {
  Graph g;
  CHECK_THROWS_AS(g.input(DenseArray::vector({1.0, std::nan("")})), NonFiniteError);
  const NodeId big = g.input(DenseArray::vector({1e200, 1e200}));
  CHECK_THROWS_AS(g.mul(big, big), NonFiniteError);
}

TEST_CASE("backward zeroes accumulators between calls") {
  Graph g;
  const NodeId x = g.input(DenseArray::vector({1.0, 2.0}));
  const NodeId y = g.sum(g.mul(x, x));
  g.backward(y);
  const DenseArray first = g.grad(x);
  g.backward(y);
  CHECK(g.grad(x) == first);
  CHECK(first == DenseArray::vector({2.0, 4.0}));
}

TEST_CASE("constants carry no gradient and generic dispatch matches direct calls") {
  Graph g;
  const NodeId c = g.constant(DenseArray::vector({1.0}));
  CHECK_FALSE(g.requires_grad(c));
  CHECK_THROWS(g.grad(c));

  const NodeId x = g.input(DenseArray({2, 2}, {1, -2, 3, -4}));
  const NodeId ins[] = {x};
  OpArgs args;
  args.factor = 0.5;
  CHECK(g.value(g.forward_op(OpKind::scale, ins, args)) == g.value(g.scale(x, 0.5)));
  CHECK(g.value(g.forward_op(OpKind::relu, ins)) == g.value(g.relu(x)));
  CHECK_THROWS_AS(g.forward_op(OpKind::mul, ins), std::invalid_argument);
  CHECK_THROWS_AS(g.forward_op(OpKind::leaf, ins), std::invalid_argument);
}

TEST_CASE("finite_diff_check rejects unusable step sizes") {
  auto f = [](Graph& g, NodeId x) { return g.sum(x); };
  CHECK_THROWS_AS(finite_diff_check(f, DenseArray::vector({1.0}), 0.0), std::invalid_argument);
  CHECK_THROWS_AS(finite_diff_check(f, DenseArray::vector({1.0}), 0.1), std::invalid_argument);
}
