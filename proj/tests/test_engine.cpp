#include <cmath>

#include <doctest.h>

#include "helpers.hpp"
#include "wholeheart/graph.hpp"

using namespace wholeheart;
using testing::matmul_oracle;
using testing::random_tensor;

TEST_CASE("matmul identity") {
  Graph g;
  Tensor a({3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor eye = Tensor::zeros({3, 3});
  for (int i = 0; i < 3; ++i) eye.at(i, i) = 1.f;
  auto out = g.value(g.matmul(g.input(eye), g.input(a)));
  CHECK(max_abs_diff(out, a) == 0.0);
}

TEST_CASE("matmul matches triple-loop oracle on random small shapes") {
  Rng rng(7);
  for (int rep = 0; rep < 20; ++rep) {
    int64_t m = 1 + int64_t(rng.below(8));
    int64_t k = 1 + int64_t(rng.below(8));
    int64_t n = 1 + int64_t(rng.below(8));
    Tensor a = random_tensor<float>({m, k}, rng);
    Tensor b = random_tensor<float>({k, n}, rng);
    Tensor bt = random_tensor<float>({n, k}, rng);
    Graph g;
    CHECK(max_abs_diff(g.value(g.matmul(g.input(a), g.input(b))),
                       matmul_oracle(a, b)) < 1e-6);
    CHECK(max_abs_diff(g.value(g.matmul(g.input(a), g.input(bt), true)),
                       matmul_oracle(a, bt, true)) < 1e-6);
  }
}

TEST_CASE("matmul 4x5 * 5x6 against oracle") {
  Rng rng(42);
  Tensor a = random_tensor<float>({4, 5}, rng);
  Tensor b = random_tensor<float>({5, 6}, rng);
  Graph g;
  CHECK(max_abs_diff(g.value(g.matmul(g.input(a), g.input(b))),
                     matmul_oracle(a, b)) < 1e-6);
}

TEST_CASE("matmul shape mismatch raises config error") {
  Graph g;
  auto a = g.input(Tensor::zeros({2, 3}));
  auto b = g.input(Tensor::zeros({4, 5}));
  CHECK_THROWS_AS((void)g.matmul(a, b), ConfigError);
}

TEST_CASE("softmax of [0, ln 3] is [0.25, 0.75]") {
  Graph g;
  Tensor x({1, 2}, {0.f, float(std::log(3.0))});
  auto y = g.value(g.softmax(g.input(x)));
  CHECK(y.data[0] == doctest::Approx(0.25).epsilon(1e-6));
  CHECK(y.data[1] == doctest::Approx(0.75).epsilon(1e-6));
}

TEST_CASE("softmax rows sum to one and shift invariance holds") {
  Rng rng(3);
  Tensor x = random_tensor<float>({5, 7}, rng, -4.0, 4.0);
  Tensor shifted = x;
  for (int64_t r = 0; r < 5; ++r) {
    for (int64_t c = 0; c < 7; ++c) shifted.at(r, c) += 100.f;
  }
  Graph g;
  auto y = g.value(g.softmax(g.input(x)));
  auto ys = g.value(g.softmax(g.input(shifted)));
  for (int64_t r = 0; r < 5; ++r) {
    double sum = 0;
    for (int64_t c = 0; c < 7; ++c) sum += y.at(r, c);
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
  }
  CHECK(max_abs_diff(y, ys) < 1e-6);
}

TEST_CASE("layer_norm rows have zero mean, unit variance before affine") {
  Rng rng(11);
  Tensor x = random_tensor<float>({6, 16}, rng, -3.0, 5.0);
  Tensor gamma = Tensor::full({1, 16}, 1.f);
  Tensor beta = Tensor::zeros({1, 16});
  Graph g;
  auto y = g.value(g.layer_norm(g.input(x), g.input(gamma), g.input(beta)));
  for (int64_t r = 0; r < 6; ++r) {
    double mean = 0, var = 0;
    for (int64_t c = 0; c < 16; ++c) mean += y.at(r, c);
    mean /= 16;
    for (int64_t c = 0; c < 16; ++c) {
      double d = y.at(r, c) - mean;
      var += d * d;
    }
    var /= 16;
    CHECK(std::abs(mean) < 1e-5);
    CHECK(std::abs(var - 1.0) < 1e-4);
  }
}

TEST_CASE("gelu matches the exact erf form") {
  Graph g;
  Tensor x({1, 3}, {-1.f, 0.f, 1.f});
  auto y = g.value(g.gelu(g.input(x)));
  CHECK(y.data[1] == 0.f);
  CHECK(y.data[2] == doctest::Approx(0.8413447).epsilon(1e-6));
  CHECK(y.data[0] == doctest::Approx(-0.1586553).epsilon(1e-5));
}

TEST_CASE("add broadcasts a single-row bias") {
  Graph g;
  Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b({1, 3}, {10, 20, 30});
  auto y = g.value(g.add(g.input(a), g.input(b)));
  Tensor want({2, 3}, {11, 22, 33, 14, 25, 36});
  CHECK(max_abs_diff(y, want) == 0.0);
}

TEST_CASE("scale multiplies every element") {
  Graph g;
  Tensor a({2, 2}, {1, -2, 3, -4});
  auto y = g.value(g.scale(g.input(a), -0.5));
  Tensor want({2, 2}, {-0.5f, 1.f, -1.5f, 2.f});
  CHECK(max_abs_diff(y, want) == 0.0);
}

TEST_CASE("gather, scatter, repeat and mean over rows") {
  Graph g;
  Tensor x({3, 2}, {1, 2, 3, 4, 5, 6});
  auto gathered = g.value(g.gather_rows(g.input(x), {2, 0, 2}));
  CHECK(max_abs_diff(gathered, Tensor({3, 2}, {5, 6, 1, 2, 5, 6})) == 0.0);

  auto scattered = g.value(g.scatter_rows(g.input(Tensor({2, 2}, {1, 2, 3, 4})),
                                          {2, 0}, 4));
  CHECK(max_abs_diff(scattered, Tensor({4, 2}, {3, 4, 0, 0, 1, 2, 0, 0})) == 0.0);

  auto repeated = g.value(g.repeat_rows(g.input(Tensor({1, 2}, {7, 8})), 3));
  CHECK(max_abs_diff(repeated, Tensor({3, 2}, {7, 8, 7, 8, 7, 8})) == 0.0);

  auto mean = g.value(g.mean_rows(g.input(x)));
  CHECK(max_abs_diff(mean, Tensor({1, 2}, {3, 4})) == 0.0);
}

TEST_CASE("scatter_rows rejects duplicate indices") {
  Graph g;
  auto x = g.input(Tensor::zeros({2, 2}));
  CHECK_THROWS_AS((void)g.scatter_rows(x, {1, 1}, 3), ConfigError);
}

TEST_CASE("concat and slice invert each other on both axes") {
  Rng rng(5);
  Tensor a = random_tensor<float>({3, 4}, rng);
  Tensor b = random_tensor<float>({2, 4}, rng);
  Tensor c = random_tensor<float>({3, 5}, rng);
  Graph g;
  auto cat0 = g.concat(g.input(a), g.input(b), 0);
  CHECK(max_abs_diff(g.value(g.slice(cat0, 0, 0, 3)), a) == 0.0);
  CHECK(max_abs_diff(g.value(g.slice(cat0, 0, 3, 2)), b) == 0.0);
  auto cat1 = g.concat(g.input(a), g.input(c), 1);
  CHECK(max_abs_diff(g.value(g.slice(cat1, 1, 0, 4)), a) == 0.0);
  CHECK(max_abs_diff(g.value(g.slice(cat1, 1, 4, 5)), c) == 0.0);
}

TEST_CASE("cols_to_rows moves column blocks into row blocks") {
  Graph g;
  // two rows, two blocks of two columns
  Tensor x({2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
  auto y = g.value(g.cols_to_rows(g.input(x), 2));
  // block f of row r lands at row f*R + r
  Tensor want({4, 2}, {1, 2, 5, 6, 3, 4, 7, 8});
  CHECK(max_abs_diff(y, want) == 0.0);
}

TEST_CASE("neighborhood3x3 stacks in-bounds neighbours, zero-padded") {
  Graph g;
  // one group, 2x2 grid, one channel
  Tensor x({4, 1}, {1, 2, 3, 4});
  auto y = g.value(g.neighborhood3x3(g.input(x), 1, 2, 2));
  CHECK(y.shape == std::vector<int64_t>({4, 9}));
  // row (0,0): taps (dy,dx) row-major, in-bounds are (0,0),(0,1),(1,0),(1,1)
  Tensor want_row({1, 9}, {0, 0, 0, 0, 1, 2, 0, 3, 4});
  for (int64_t c = 0; c < 9; ++c) CHECK(y.at(0, c) == want_row.data[size_t(c)]);
  // row (1,1): everything in bounds except the bottom and right taps
  Tensor want_last({1, 9}, {1, 2, 0, 3, 4, 0, 0, 0, 0});
  for (int64_t c = 0; c < 9; ++c) CHECK(y.at(3, c) == want_last.data[size_t(c)]);
}

TEST_CASE("mse averages squared error over all elements") {
  Graph g;
  Tensor p({2, 2}, {1, 2, 3, 4});
  Tensor t({2, 2}, {1, 2, 3, 2});
  auto loss = g.value(g.mse(g.input(p), g.input(t)));
  CHECK(loss.data[0] == doctest::Approx(1.0).epsilon(1e-7));
}

TEST_CASE("cross_entropy on uniform logits is log(C), excluded rows ignored") {
  Graph g;
  Tensor logits({2, 4}, {0, 0, 0, 0, 100, 0, 0, 0});
  auto loss1 = g.value(g.cross_entropy(g.input(logits), {1, 0}, {1, 0}));
  CHECK(loss1.data[0] == doctest::Approx(std::log(4.0)).epsilon(1e-6));
  auto loss2 = g.value(g.cross_entropy(g.input(logits), {1, 0}, {1, 1}));
  CHECK(loss2.data[0] == doctest::Approx(0.5 * std::log(4.0)).epsilon(1e-4));
}

TEST_CASE("soft_dice is zero for a perfect one-hot prediction") {
  Graph g;
  Tensor probs({3, 2}, {1, 0, 0, 1, 1, 0});
  auto loss = g.value(g.soft_dice(g.input(probs), {0, 1, 0}, {3, 3, 3}, 1.0));
  CHECK(loss.data[0] == doctest::Approx(0.0).epsilon(1e-7));
}

TEST_CASE("soft_dice hand-computed value and availability masking") {
  Graph g;
  // one row, two classes, uniform probabilities, target class 0
  // A0=0.5 B0=1.5 D0=(1+1)/(1.5+1)=0.8; A1=0 B1=0.5 D1=(0+1)/1.5=2/3
  Tensor probs({1, 2}, {0.5f, 0.5f});
  auto loss = g.value(g.soft_dice(g.input(probs), {0}, {3}, 1.0));
  double want = 0.5 * ((1.0 - 0.8) + (1.0 - 2.0 / 3.0));
  CHECK(loss.data[0] == doctest::Approx(want).epsilon(1e-6));

  // class 1 unavailable: only class 0 participates
  auto loss0 = g.value(g.soft_dice(g.input(probs), {0}, {1}, 1.0));
  CHECK(loss0.data[0] == doctest::Approx(1.0 - 0.8).epsilon(1e-6));

  // nothing available: loss 0, no gradient
  auto loss_none = g.value(g.soft_dice(g.input(probs), {0}, {0}, 1.0));
  CHECK(loss_none.data[0] == 0.f);
}

TEST_CASE("finite check names the op") {
  Graph g(true);
  Tensor big = Tensor::full({1, 2}, 1e30f);
  auto n = g.input(big);
  // 1e30 * 1e30 overflows float
  CHECK_THROWS_WITH_AS((void)g.matmul(n, n, true),
                       doctest::Contains("matmul"), NumericError);
}
