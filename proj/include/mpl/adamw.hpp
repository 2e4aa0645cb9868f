// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "mpl/error.hpp"
#include "mpl/tensor.hpp"

namespace mpl::num {

struct AdamWConfig {
  float learning_rate = 1e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float epsilon = 1e-8f;
  float weight_decay = 0.01f;
};

// Decoupled-weight-decay Adam. Moment buffers are keyed by parameter name
// so they can ride along in checkpoints.
template <typename T>
class AdamWT {
 public:
  struct Slot {
    std::vector<T> m;
    std::vector<T> v;
  };

  explicit AdamWT(AdamWConfig cfg = {}) : cfg_(cfg) {}

  const AdamWConfig& config() const { return cfg_; }
  int64_t step_count() const { return step_; }

  // One update over the given named parameters. Every parameter must carry a
  // populated gradient; grads are cleared afterwards.
  void step(std::map<std::string, TensorT<T>>& params) {
    for (auto& [name, p] : params) {
      if (!p.has_grad()) {
        throw ContractError("adamw: parameter '" + name + "' has no gradient");
      }
    }
    ++step_;
    const T b1 = static_cast<T>(cfg_.beta1);
    const T b2 = static_cast<T>(cfg_.beta2);
    const T lr = static_cast<T>(cfg_.learning_rate);
    const T eps = static_cast<T>(cfg_.epsilon);
    const T wd = static_cast<T>(cfg_.weight_decay);
    const T bc1 = T(1) - static_cast<T>(std::pow(cfg_.beta1, step_));
    const T bc2 = T(1) - static_cast<T>(std::pow(cfg_.beta2, step_));
    for (auto& [name, p] : params) {
      Slot& s = slots_[name];
      if (s.m.empty()) {
        s.m.assign(p.size(), T(0));
        s.v.assign(p.size(), T(0));
      } else if (s.m.size() != p.size()) {
        throw ContractError("adamw: stale state for parameter '" + name + "'");
      }
      auto g = p.grad();
      auto w = p.data_mut();
      for (size_t i = 0; i < w.size(); ++i) {
        s.m[i] = b1 * s.m[i] + (T(1) - b1) * g[i];
        s.v[i] = b2 * s.v[i] + (T(1) - b2) * g[i] * g[i];
        const T mhat = s.m[i] / bc1;
        const T vhat = s.v[i] / bc2;
        w[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * w[i]);
      }
      p.zero_grad();
    }
  }

  std::map<std::string, Slot>& slots() { return slots_; }
  const std::map<std::string, Slot>& slots() const { return slots_; }
  void set_step_count(int64_t s) { step_ = s; }

 private:
  AdamWConfig cfg_;
  std::map<std::string, Slot> slots_;
  int64_t step_ = 0;
};

using AdamW = AdamWT<float>;

}  // namespace mpl::num
