#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "wholeheart/common.hpp"
#include "wholeheart/container.hpp"
#include "wholeheart/tensor.hpp"

namespace wholeheart {

struct MetricStat {
  double mean = 0, stdev = 0;
  int64_t n = 0;
};

// Population statistics (divide by n), matching "mean ± std" table entries.
inline MetricStat mean_std(const std::vector<double>& xs) {
  if (xs.empty()) throw DataError("mean_std: empty input");
  MetricStat s;
  s.n = int64_t(xs.size());
  for (double x : xs) s.mean += x;
  s.mean /= double(s.n);
  for (double x : xs) s.stdev += (x - s.mean) * (x - s.mean);
  s.stdev = std::sqrt(s.stdev / double(s.n));
  return s;
}

inline double mse_of(const Tensor& ref, const Tensor& test) {
  if (!ref.same_shape(test)) {
    throw DataError("psnr: shape mismatch " + shape_str(ref.shape) + " vs " +
                    shape_str(test.shape));
  }
  double acc = 0;
  for (size_t i = 0; i < ref.data.size(); ++i) {
    double d = double(ref.data[i]) - double(test.data[i]);
    acc += d * d;
  }
  return acc / double(ref.data.size());
}

// 10 log10(peak^2 / MSE), capped at 120 dB once MSE drops below 1e-12.
inline double psnr(const Tensor& ref, const Tensor& test, double peak = 1.0) {
  double m = mse_of(ref, test);
  if (m < 1e-12) return 120.0;
  return 10.0 * std::log10(peak * peak / m);
}

// 2|A n B| / (|A| + |B|); the both-empty case counts as perfect agreement so
// absent structures do not poison per-class averages.
inline double dice(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& truth,
                   uint8_t cls) {
  if (pred.size() != truth.size()) throw DataError("dice: shape mismatch");
  int64_t inter = 0, a = 0, b = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    bool pa = pred[i] == cls, pb = truth[i] == cls;
    a += pa;
    b += pb;
    inter += (pa && pb);
  }
  if (a + b == 0) return 1.0;
  return 2.0 * double(inter) / double(a + b);
}

inline double dice(const TensorT<uint8_t>& pred, const TensorT<uint8_t>& truth, uint8_t cls) {
  if (!pred.same_shape(truth)) throw DataError("dice: shape mismatch");
  return dice(pred.data, truth.data, cls);
}

// Per-target absolute-error statistics in native units.
inline std::vector<MetricStat> mae_metric(const std::vector<std::vector<double>>& preds,
                                          const std::vector<std::vector<double>>& truths) {
  if (preds.empty() || preds.size() != truths.size()) {
    throw DataError("mae_metric: empty or misaligned inputs");
  }
  size_t k = truths[0].size();
  std::vector<MetricStat> out;
  for (size_t j = 0; j < k; ++j) {
    std::vector<double> errs;
    for (size_t i = 0; i < preds.size(); ++i) {
      if (preds[i].size() != k || truths[i].size() != k) {
        throw DataError("mae_metric: ragged rows");
      }
      errs.push_back(std::abs(preds[i][j] - truths[i][j]));
    }
    out.push_back(mean_std(errs));
  }
  return out;
}

// MAE of the constant train-mean predictor evaluated on the test split.
inline std::vector<MetricStat> mean_guess(const std::vector<std::vector<double>>& train,
                                          const std::vector<std::vector<double>>& test) {
  if (train.empty()) throw DataError("mean_guess: empty train split");
  size_t k = train[0].size();
  std::vector<double> mean(k, 0.0);
  for (const auto& r : train)
    for (size_t j = 0; j < k; ++j) mean[j] += r[j];
  for (double& m : mean) m /= double(train.size());
  std::vector<MetricStat> out;
  for (size_t j = 0; j < k; ++j) {
    std::vector<double> errs;
    for (const auto& r : test) errs.push_back(std::abs(r[j] - mean[j]));
    out.push_back(mean_std(errs));
  }
  return out;
}

inline double cosine_similarity(const std::vector<float>& u, const std::vector<float>& v) {
  if (u.size() != v.size()) throw DataError("cosine: length mismatch");
  if (u.empty()) throw DataError("cosine: empty vectors");
  // bitwise-identical inputs are exactly parallel; skip the rounding noise
  if (std::memcmp(u.data(), v.data(), u.size() * sizeof(float)) == 0) {
    double n = 0;
    for (float x : u) n += double(x) * double(x);
    if (n == 0) throw DataError("cosine: zero vector");
    return 1.0;
  }
  double dot = 0, nu = 0, nv = 0;
  for (size_t i = 0; i < u.size(); ++i) {
    dot += double(u[i]) * double(v[i]);
    nu += double(u[i]) * double(u[i]);
    nv += double(v[i]) * double(v[i]);
  }
  if (nu == 0 || nv == 0) throw DataError("cosine: zero vector");
  return dot / (std::sqrt(nu) * std::sqrt(nv));
}

// Mean silhouette coefficient over all points (Euclidean); singleton
// clusters contribute 0 by convention.
inline double silhouette(const std::vector<std::vector<double>>& points,
                         const std::vector<int>& groups) {
  size_t n = points.size();
  if (n != groups.size() || n < 2) throw DataError("silhouette: bad inputs");
  std::vector<int> uniq(groups);
  std::sort(uniq.begin(), uniq.end());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  if (uniq.size() < 2) throw DataError("silhouette: need at least two groups");

  auto dist = [&](size_t i, size_t j) {
    double d = 0;
    for (size_t k = 0; k < points[i].size(); ++k) {
      double t = points[i][k] - points[j][k];
      d += t * t;
    }
    return std::sqrt(d);
  };

  double total = 0;
  for (size_t i = 0; i < n; ++i) {
    std::map<int, std::pair<double, int64_t>> acc;  // group -> (sum dist, count)
    for (size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      auto& a = acc[groups[j]];
      a.first += dist(i, j);
      a.second += 1;
    }
    auto own = acc.find(groups[i]);
    if (own == acc.end()) continue;  // singleton: s = 0
    double a = own->second.first / double(own->second.second);
    double b = 1e300;
    for (const auto& [g, p] : acc) {
      if (g == groups[i]) continue;
      b = std::min(b, p.first / double(p.second));
    }
    double denom = std::max(a, b);
    if (denom > 0) total += (b - a) / denom;
  }
  return total / double(n);
}

// Equal-frequency binning into 5 groups by rank (ties broken by index).
inline std::vector<int> quintile_groups(const std::vector<double>& values) {
  size_t n = values.size();
  if (n < 5) throw DataError("quintile_groups: need at least 5 values");
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t(0));
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return values[a] < values[b]; });
  std::vector<int> groups(n);
  for (size_t rank = 0; rank < n; ++rank) groups[order[rank]] = int(rank * 5 / n);
  return groups;
}

// Per-subject metric rows plus aggregates recomputable from them.
struct EvalReport {
  ordered_json meta = ordered_json::object();
  std::vector<std::pair<int64_t, std::map<std::string, double>>> subjects;

  void add(int64_t subject, std::map<std::string, double> values) {
    subjects.emplace_back(subject, std::move(values));
  }

  ordered_json to_json() const {
    ordered_json j;
    j["meta"] = meta;
    ordered_json per = ordered_json::array();
    std::map<std::string, std::vector<double>> columns;
    for (const auto& [id, vals] : subjects) {
      ordered_json e;
      e["subject"] = id;
      for (const auto& [k, v] : vals) {
        e[k] = v;
        columns[k].push_back(v);
      }
      per.push_back(e);
    }
    j["per_subject"] = per;
    ordered_json agg;
    for (const auto& [k, col] : columns) {
      MetricStat s = mean_std(col);
      agg[k]["mean"] = s.mean;
      agg[k]["std"] = s.stdev;
      agg[k]["n"] = s.n;
    }
    j["aggregate"] = agg;
    return j;
  }
};

}  // namespace wholeheart
