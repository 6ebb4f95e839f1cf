#include <cmath>

#include <doctest.h>

#include "helpers.hpp"
#include "wholeheart/graph.hpp"

using namespace wholeheart;
using testing::check_gradients;
using testing::random_tensor;

using DGraph = GraphT<double>;
using DTensor = TensorT<double>;

TEST_CASE("dL/dw = 4 for loss = mse(w*x, y), w=2 x=1 y=0") {
  DGraph g;
  DTensor w = DTensor::scalar(2.0);
  auto wid = g.param(&w);
  auto x = g.input(DTensor::scalar(1.0));
  auto y = g.input(DTensor::scalar(0.0));
  auto loss = g.mse(g.matmul(wid, x), y);
  g.backward(loss, false);
  CHECK(g.grad_of(&w)->data[0] == doctest::Approx(4.0).epsilon(1e-9));
}

TEST_CASE("gradient of sum(softmax(z)) is the zero vector") {
  DGraph g;
  Rng rng(21);
  DTensor z = random_tensor<double>({1, 6}, rng, -2.0, 2.0);
  auto zid = g.param(&z);
  auto sm = g.softmax(zid);
  // sum via matmul with a ones column
  auto ones = g.input(DTensor::full({6, 1}, 1.0));
  auto loss = g.matmul(sm, ones);
  g.backward(loss, false);
  const DTensor* dz = g.grad_of(&z);
  REQUIRE(dz != nullptr);
  for (double v : dz->data) CHECK(std::abs(v) < 1e-12);
}

TEST_CASE("finite differences agree for every primitive") {
  Rng rng(123);
  DTensor a = random_tensor<double>({3, 4}, rng);
  DTensor b = random_tensor<double>({4, 5}, rng);
  DTensor bt = random_tensor<double>({5, 4}, rng);
  DTensor bias = random_tensor<double>({1, 5}, rng);
  DTensor gamma = random_tensor<double>({1, 4}, rng, 0.5, 1.5);
  DTensor beta = random_tensor<double>({1, 4}, rng, -0.5, 0.5);
  DTensor target = random_tensor<double>({3, 5}, rng);
  DTensor target34 = random_tensor<double>({3, 4}, rng);
  DTensor row = random_tensor<double>({1, 4}, rng);

  SUBCASE("matmul + add bias + mse") {
    auto res = check_gradients(
        {{"a", &a}, {"b", &b}, {"bias", &bias}},
        [&](DGraph& g) {
          auto y = g.add(g.matmul(g.param(&a), g.param(&b)), g.param(&bias));
          return g.mse(y, g.input(target));
        },
        1e-5);
    CHECK(res.max_rel_err < 1e-5);
  }

  SUBCASE("matmul transposed") {
    auto res = check_gradients(
        {{"a", &a}, {"bt", &bt}},
        [&](DGraph& g) {
          return g.mse(g.matmul(g.param(&a), g.param(&bt), true), g.input(target));
        },
        1e-5);
    CHECK(res.max_rel_err < 1e-5);
  }

  SUBCASE("layer_norm") {
    auto res = check_gradients(
        {{"a", &a}, {"gamma", &gamma}, {"beta", &beta}},
        [&](DGraph& g) {
          auto y = g.layer_norm(g.param(&a), g.param(&gamma), g.param(&beta));
          return g.mse(y, g.input(target34));
        },
        1e-5);
    CHECK(res.max_rel_err < 1e-5);
  }

  SUBCASE("softmax, gelu, scale chain") {
    auto res = check_gradients(
        {{"a", &a}},
        [&](DGraph& g) {
          auto y = g.softmax(g.scale(g.gelu(g.param(&a)), 1.7));
          return g.mse(y, g.input(target34));
        },
        1e-5);
    CHECK(res.max_rel_err < 1e-5);
  }

  SUBCASE("gather, scatter, repeat, mean, concat, slice") {
    auto res = check_gradients(
        {{"a", &a}, {"row", &row}},
        [&](DGraph& g) {
          auto ga = g.gather_rows(g.param(&a), {2, 0, 1, 2});
          auto sc = g.scatter_rows(ga, {3, 1, 0, 2}, 4);
          auto rep = g.repeat_rows(g.param(&row), 4);
          auto cat = g.concat(sc, rep, 1);
          auto sl = g.slice(cat, 1, 2, 4);
          auto mean = g.mean_rows(sl);
          return g.mse(mean, g.input(DTensor::full({1, 4}, 0.3)));
        },
        1e-5);
    CHECK(res.max_rel_err < 1e-5);
  }

  SUBCASE("cols_to_rows and neighborhood3x3") {
    auto res = check_gradients(
        {{"a", &a}},
        [&](DGraph& g) {
          auto n0 = g.cols_to_rows(g.param(&a), 2);      // 3x4 -> 6x2
          auto nb = g.neighborhood3x3(n0, 1, 2, 3);      // 6 rows as 2x3 grid
          return g.mse(nb, g.input(DTensor::full({6, 18}, 0.1)));
        },
        1e-5);
    CHECK(res.max_rel_err < 1e-5);
  }

  SUBCASE("cross_entropy with excluded rows") {
    auto res = check_gradients(
        {{"a", &a}},
        [&](DGraph& g) {
          auto logits = g.scale(g.param(&a), 2.0);
          return g.cross_entropy(logits, {1, 3, 0}, {1, 0, 1});
        },
        1e-5);
    CHECK(res.max_rel_err < 1e-5);
  }

  SUBCASE("soft_dice through softmax") {
    auto res = check_gradients(
        {{"a", &a}},
        [&](DGraph& g) {
          auto probs = g.softmax(g.param(&a));
          return g.soft_dice(probs, {1, 3, 0}, {0xf, 0x5, 0xf}, 1.0);
        },
        1e-5);
    CHECK(res.max_rel_err < 1e-5);
  }
}

TEST_CASE("gradients accumulate when a parameter is used twice") {
  DTensor w = DTensor::scalar(1.5);
  auto res = check_gradients(
      {{"w", &w}},
      [&](DGraph& g) {
        auto wid = g.param(&w);
        auto prod = g.matmul(wid, wid);  // w^2
        return g.mse(prod, g.input(DTensor::scalar(0.0)));
      },
      1e-6);
  // d(w^4)/dw = 4 w^3 = 13.5
  CHECK(res.max_rel_err < 1e-8);
  DGraph g;
  auto wid = g.param(&w);
  auto loss = g.mse(g.matmul(wid, wid), g.input(DTensor::scalar(0.0)));
  g.backward(loss, false);
  CHECK(g.grad_of(&w)->data[0] == doctest::Approx(13.5).epsilon(1e-9));
}

TEST_CASE("backward releases interior buffers but keeps parameter grads") {
  DGraph g;
  DTensor w = DTensor::scalar(2.0);
  auto wid = g.param(&w);
  auto y = g.matmul(wid, wid);
  auto loss = g.mse(y, g.input(DTensor::scalar(1.0)));
  g.backward(loss);  // release_memory defaults on
  CHECK(g.grad_of(&w) != nullptr);
  CHECK_THROWS_AS((void)g.value(y), ConfigError);
}
