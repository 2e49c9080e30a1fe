#pragma once

// Adam with bias correction and optional global-norm gradient clipping.

#include <cmath>
#include <iostream>
#include <string>
#include <unordered_map>
#include <vector>

#include "vmmt/params.hpp"

namespace vmmt {

struct AdamConfig {
  double lr = 0.002;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 5.0;  // global norm; 0 disables
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  int64_t step_count() const { return t_; }

  // Applies one update. Parameters without an entry in `grads` are left
  // untouched. A non-finite gradient anywhere skips the whole step and
  // warns with the offending parameter's name.
  void step(ParamStore& params, const ParamGrads& grads) {
    for (const auto& p : params.all()) {
      auto it = grads.find(p.name);
      if (it == grads.end()) continue;
      for (double g : it->second) {
        if (!std::isfinite(g)) {
          std::cerr << "warning: non-finite gradient for parameter '" << p.name
                    << "'; skipping optimizer step\n";
          return;
        }
      }
    }

    double scale = 1.0;
    if (cfg_.grad_clip > 0.0) {
      double sq = 0.0;
      for (const auto& [name, g] : grads)
        for (double v : g) sq += v * v;
      double norm = std::sqrt(sq);
      if (norm > cfg_.grad_clip) scale = cfg_.grad_clip / norm;
    }

    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& p : params.all()) {
      auto it = grads.find(p.name);
      if (it == grads.end()) continue;
      check(it->second.size() == p.data.size(),
            "adam: gradient size mismatch for '" + p.name + "'");
      auto& st = state_[p.name];
      if (st.m.empty()) {
        st.m.assign(p.data.size(), 0.0);
        st.v.assign(p.data.size(), 0.0);
      }
      for (size_t i = 0; i < p.data.size(); ++i) {
        double g = it->second[i] * scale;
        st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * g;
        st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * g * g;
        double mhat = st.m[i] / bc1;
        double vhat = st.v[i] / bc2;
        p.data[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

 private:
  struct Slot {
    std::vector<double> m, v;
  };
  AdamConfig cfg_;
  int64_t t_ = 0;
  std::unordered_map<std::string, Slot> state_;
};

}  // namespace vmmt
