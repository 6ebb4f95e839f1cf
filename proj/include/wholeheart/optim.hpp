#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "wholeheart/common.hpp"
#include "wholeheart/tensor.hpp"

namespace wholeheart {

// Linear warmup from zero to lr_max over warmup_steps, then cosine decay to
// lr_min at total_steps. step counts completed optimizer steps.
inline double cosine_lr(int64_t step, int64_t total_steps, double lr_max,
                        double lr_min, int64_t warmup_steps) {
  if (total_steps <= 0 || step < 0 || step > total_steps) {
    throw ConfigError("cosine_lr: step " + std::to_string(step) +
                      " outside [0, " + std::to_string(total_steps) + "]");
  }
  if (warmup_steps < 0 || warmup_steps >= total_steps) {
    throw ConfigError("cosine_lr: warmup must lie inside the schedule");
  }
  if (step < warmup_steps) {
    return lr_max * double(step) / double(warmup_steps);
  }
  double tau = double(step - warmup_steps) / double(total_steps - warmup_steps);
  return lr_min + (lr_max - lr_min) * 0.5 * (1.0 + std::cos(3.141592653589793 * tau));
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// AdamW with decoupled weight decay: the decay shrinks the parameter before
// the moment update, and the moment update uses bias correction. Parameters
// are registered once; updates are skipped for parameters without a gradient
// this step. First and second moments are kept in double.
class AdamW {
 public:
  struct Slot {
    Tensor* param = nullptr;
    std::string name;
    double lr_scale = 1.0;  // per-group multiplier, e.g. fresh task heads
    std::vector<double> m, v;
  };

  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  void add_param(Tensor* p, std::string name, double lr_scale = 1.0) {
    Slot s;
    s.param = p;
    s.name = std::move(name);
    s.lr_scale = lr_scale;
    s.m.assign(p->data.size(), 0.0);
    s.v.assign(p->data.size(), 0.0);
    slots_.push_back(std::move(s));
  }

  int64_t step_count() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }
  std::vector<Slot>& slots() { return slots_; }

  // grad_lookup(param) returns the gradient or nullptr.
  template <class GradLookup>
  void step(double lr, GradLookup&& grad_lookup) {
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (Slot& s : slots_) {
      const Tensor* g = grad_lookup(static_cast<const Tensor*>(s.param));
      if (!g) continue;
      double eta = lr * s.lr_scale;
      float* w = s.param->data.data();
      const float* gd = g->data.data();
      double decay = 1.0 - eta * cfg_.weight_decay;
      for (size_t i = 0; i < s.m.size(); ++i) {
        double wi = double(w[i]) * decay;
        double gi = gd[i];
        s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * gi;
        s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * gi * gi;
        double mhat = s.m[i] / bc1;
        double vhat = s.v[i] / bc2;
        w[i] = float(wi - eta * mhat / (std::sqrt(vhat) + cfg_.eps));
      }
    }
  }

  // Serialization hooks for checkpoints: moments flattened per slot.
  void set_step_count(int64_t t) { t_ = t; }

 private:
  AdamWConfig cfg_;
  std::vector<Slot> slots_;
  int64_t t_ = 0;
};

}  // namespace wholeheart
