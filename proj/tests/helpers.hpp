#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "wholeheart/graph.hpp"
#include "wholeheart/rng.hpp"
#include "wholeheart/tensor.hpp"
#include "wholeheart/tokenizer.hpp"

namespace wholeheart::testing {

// Independent matmul reference: plain i-j-k triple loop, double accumulator.
template <typename T>
TensorT<T> matmul_oracle(const TensorT<T>& a, const TensorT<T>& b, bool trans_b = false) {
  int64_t m = a.rows(), k = a.cols();
  int64_t n = trans_b ? b.rows() : b.cols();
  TensorT<T> c = TensorT<T>::zeros({m, n});
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      double acc = 0;
      for (int64_t p = 0; p < k; ++p) {
        double bv = trans_b ? b.at(j, p) : b.at(p, j);
        acc += double(a.at(i, p)) * bv;
      }
      c.at(i, j) = T(acc);
    }
  }
  return c;
}

template <typename T>
TensorT<T> random_tensor(std::vector<int64_t> shape, Rng& rng, double lo = -1.0,
                         double hi = 1.0) {
  TensorT<T> t = TensorT<T>::zeros(std::move(shape));
  for (T& x : t.data) x = T(rng.uniform(lo, hi));
  return t;
}

// Stack of random planes in canonical view order, already in [0, 1].
inline PlaneStack random_stack(int64_t sa, int64_t la, int64_t frames, int64_t image,
                               Rng& rng) {
  PlaneStack s;
  s.sa_total = int32_t(sa);
  s.la_total = int32_t(la);
  for (int64_t i = 0; i < sa + la; ++i) {
    PlaneView v;
    v.view = (i < sa ? "SA" + std::to_string(i) : "LA" + std::to_string(i - sa));
    v.plane_id = int32_t(i);
    v.vol = random_tensor<float>({frames, image, image}, rng, 0.0, 1.0);
    s.planes.push_back(std::move(v));
  }
  return s;
}

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst;  // "param[i]: analytic vs fd"
  int64_t checked = 0;
};

// Central finite differences against the reverse-mode gradient on the double
// instantiation. build must be a pure function of the parameter contents and
// return the loss node of a freshly built graph.
inline GradCheckResult check_gradients(
    std::vector<std::pair<std::string, TensorT<double>*>> params,
    const std::function<GraphT<double>::NodeId(GraphT<double>&)>& build,
    double h_scale = 1e-2, int64_t stride = 1) {
  GraphT<double> g(true);
  auto loss = build(g);
  g.backward(loss, /*release_memory=*/false);

  GradCheckResult res;
  for (auto& [name, p] : params) {
    const TensorT<double>* an = g.grad_of(p);
    for (int64_t i = 0; i < p->numel(); i += stride) {
      double save = p->data[size_t(i)];
      double h = h_scale * std::max(1.0, std::abs(save));
      p->data[size_t(i)] = save + h;
      GraphT<double> gp;
      double lp = gp.value(build(gp)).data[0];
      p->data[size_t(i)] = save - h;
      GraphT<double> gm;
      double lm = gm.value(build(gm)).data[0];
      p->data[size_t(i)] = save;
      double fd = (lp - lm) / (2.0 * h);
      double a = an ? an->data[size_t(i)] : 0.0;
      double rel = std::abs(fd - a) / std::max({std::abs(fd), std::abs(a), 1e-6});
      ++res.checked;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst = name + "[" + std::to_string(i) + "]: analytic " +
                    std::to_string(a) + " vs fd " + std::to_string(fd);
      }
    }
  }
  return res;
}

}  // namespace wholeheart::testing
