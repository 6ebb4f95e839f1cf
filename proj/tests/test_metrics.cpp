#include <cmath>
#include <vector>

#include "doctest.h"
#include "wholeheart/metrics.hpp"
#include "wholeheart/rng.hpp"

using namespace wholeheart;

TEST_CASE("psnr follows the formula and the cap rule") {
  Tensor ref = Tensor::zeros({10, 10});
  Tensor t1 = Tensor::full({10, 10}, 0.1f);  // MSE 0.01
  CHECK(psnr(ref, t1) == doctest::Approx(20.0).epsilon(1e-6));
  Tensor t2 = Tensor::full({10, 10}, float(std::sqrt(0.001)));  // MSE 0.001
  CHECK(psnr(ref, t2) == doctest::Approx(30.0).epsilon(1e-4));
  CHECK(psnr(ref, ref) == 120.0);
  Tensor bad = Tensor::zeros({5, 5});
  CHECK_THROWS_AS(psnr(ref, bad), DataError);
}

TEST_CASE("psnr strictly decreases with noise level") {
  Rng rng(7);
  Tensor ref = Tensor::zeros({64, 64});
  for (auto& v : ref.data) v = float(rng.uniform());
  double prev = 1e9;
  for (double sigma : {0.01, 0.02, 0.05}) {
    Rng noise(42);
    Tensor t = ref;
    for (auto& v : t.data) v = float(v + sigma * noise.normal());
    double p = psnr(ref, t);
    CHECK(p < prev);
    prev = p;
  }
}

TEST_CASE("dice conventions") {
  std::vector<uint8_t> a = {1, 1, 1, 1, 0, 0, 0, 0};
  std::vector<uint8_t> b = {1, 1, 0, 0, 1, 1, 0, 0};  // |A|=|B|=4, overlap 2
  CHECK(dice(a, b, 1) == doctest::Approx(0.5));
  CHECK(dice(a, a, 1) == doctest::Approx(1.0));
  std::vector<uint8_t> c = {0, 0, 0, 0, 1, 1, 1, 1};
  CHECK(dice(a, c, 1) == doctest::Approx(0.0));
  // both empty for class 3
  CHECK(dice(a, b, 3) == doctest::Approx(1.0));
  // symmetry and joint permutation invariance
  CHECK(dice(a, b, 1) == dice(b, a, 1));
  std::vector<uint8_t> ap = {0, 1, 1, 0, 1, 0, 1, 0};
  std::vector<uint8_t> bp = {0, 1, 0, 1, 1, 0, 0, 1};  // same permutation applied to both
  CHECK(dice(ap, bp, 1) == dice(a, b, 1));
  CHECK_THROWS_AS(dice(a, std::vector<uint8_t>{1}, 1), DataError);
}

TEST_CASE("mae statistics") {
  std::vector<std::vector<double>> truths = {{10, 50}, {20, 60}, {30, 70}};
  auto zero = mae_metric(truths, truths);
  CHECK(zero[0].mean == doctest::Approx(0.0));
  CHECK(zero[0].stdev == doctest::Approx(0.0));
  std::vector<std::vector<double>> off = {{12, 50}, {22, 60}, {32, 70}};
  auto two = mae_metric(off, truths);
  CHECK(two[0].mean == doctest::Approx(2.0));
  CHECK(two[0].stdev == doctest::Approx(0.0));
  CHECK(two[1].mean == doctest::Approx(0.0));
  CHECK_THROWS_AS(mae_metric({}, {}), DataError);
}

TEST_CASE("mean-guess baseline") {
  // symmetric two-point cohort: constant-mean predictor errs by d
  std::vector<std::vector<double>> cohort = {{10}, {30}};
  auto mg = mean_guess(cohort, cohort);
  CHECK(mg[0].mean == doctest::Approx(10.0));
  // a single test subject equal to the mean
  auto zero = mean_guess(cohort, {{20}});
  CHECK(zero[0].mean == doctest::Approx(0.0));
  // definitional oracle: identical to mae_metric with the constant predictor
  std::vector<std::vector<double>> train = {{1, 4}, {3, 8}, {5, 6}};
  std::vector<std::vector<double>> test = {{2, 5}, {4, 9}};
  std::vector<double> mean = {3, 6};
  std::vector<std::vector<double>> preds(test.size(), mean);
  auto a = mean_guess(train, test);
  auto b = mae_metric(preds, test);
  for (size_t j = 0; j < a.size(); ++j) {
    CHECK(a[j].mean == doctest::Approx(b[j].mean).epsilon(1e-12));
    CHECK(a[j].stdev == doctest::Approx(b[j].stdev).epsilon(1e-12));
  }
}

TEST_CASE("cosine similarity") {
  std::vector<float> u = {1, 0};
  std::vector<float> v = {1, 1};
  CHECK(cosine_similarity(u, v) == doctest::Approx(std::sqrt(2.0) / 2).epsilon(1e-9));
  CHECK(cosine_similarity(u, {0, 1}) == doctest::Approx(0.0));
  // bitwise-identical vectors return exactly 1.0
  std::vector<float> w = {0.1f, 0.2f, 0.3f};
  CHECK(cosine_similarity(w, w) == 1.0);
  // scale invariance
  std::vector<float> u2 = {2, 0};
  std::vector<float> v3 = {3, 3};
  CHECK(cosine_similarity(u2, v3) ==
        doctest::Approx(cosine_similarity(u, v)).epsilon(1e-12));
  CHECK_THROWS_WITH_AS(cosine_similarity({0, 0}, {1, 1}), doctest::Contains("zero vector"),
                       DataError);
}

TEST_CASE("silhouette separates distinct clusters") {
  std::vector<std::vector<double>> pts;
  std::vector<int> groups;
  for (int i = 0; i < 10; ++i) {
    pts.push_back({double(i) * 0.01, 0.0});
    groups.push_back(0);
    pts.push_back({10.0 + double(i) * 0.01, 0.0});
    groups.push_back(1);
  }
  CHECK(silhouette(pts, groups) > 0.9);
  // identical points split across groups: no separation
  std::vector<std::vector<double>> same(8, {1.0, 2.0});
  std::vector<int> g2 = {0, 1, 0, 1, 0, 1, 0, 1};
  CHECK(silhouette(same, g2) <= 0.0);
  CHECK_THROWS_AS(silhouette(pts, std::vector<int>(20, 3)), DataError);
}

TEST_CASE("quintile groups are equal-frequency and ordered") {
  std::vector<double> v = {5, 1, 9, 3, 7, 2, 8, 4, 6, 0};
  auto g = quintile_groups(v);
  std::vector<int> counts(5, 0);
  for (int x : g) ++counts[size_t(x)];
  for (int c : counts) CHECK(c == 2);
  CHECK(g[9] == 0);  // value 0 -> lowest bin
  CHECK(g[2] == 4);  // value 9 -> highest bin
  CHECK_THROWS_AS(quintile_groups({1, 2, 3}), DataError);
}

TEST_CASE("eval report aggregates are recomputable from the entries") {
  EvalReport r;
  r.meta["task"] = "recon";
  r.meta["split"] = "test";
  r.meta["config_hash"] = "deadbeefdeadbeef";
  r.meta["psnr_scope"] = "per-plane-then-aggregated";
  r.add(0, {{"psnr_sa", 25.0}, {"psnr_la", 24.0}});
  r.add(1, {{"psnr_sa", 27.0}, {"psnr_la", 26.0}});
  r.add(2, {{"psnr_sa", 29.0}, {"psnr_la", 22.0}});
  ordered_json j = r.to_json();

  double sum = 0;
  for (const auto& e : j["per_subject"]) sum += e["psnr_sa"].get<double>();
  CHECK(std::abs(sum / 3.0 - j["aggregate"]["psnr_sa"]["mean"].get<double>()) < 1e-9);
  CHECK(j["aggregate"]["psnr_sa"]["n"] == 3);
  CHECK(j["meta"]["config_hash"] == "deadbeefdeadbeef");
  // stable serialization
  CHECK(j.dump(2) == r.to_json().dump(2));
}
