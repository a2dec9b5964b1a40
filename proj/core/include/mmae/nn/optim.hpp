#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mmae/nn/tensor.hpp"

namespace mmae::nn {

// AdamW with decoupled weight decay. Update per parameter p with gradient g:
//
//   p      -= lr * weight_decay * p                  (decay, decoupled)
//   m       = beta1 * m + (1 - beta1) * g
//   v       = beta2 * v + (1 - beta2) * g^2
//   m_hat   = m / (1 - beta1^t)
//   v_hat   = v / (1 - beta2^t)
//   p      -= lr * m_hat / (sqrt(v_hat) + eps)
//
// Parameters whose grad buffer is empty are skipped entirely (no decay), so
// frozen submodules stay untouched.
template <class T>
struct AdamWConfig {
  T lr = T(1e-3);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
  T weight_decay = T(0.01);
};

template <class T>
class AdamW {
 public:
  AdamW() = default;
  AdamW(std::vector<std::pair<std::string, Tensor<T>>> params,
        AdamWConfig<T> cfg)
      : params_(std::move(params)), cfg_(cfg) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(params_[i].second.numel(), T(0));
      v_[i].assign(params_[i].second.numel(), T(0));
    }
  }

  void set_lr(T lr) { cfg_.lr = lr; }
  T lr() const { return cfg_.lr; }
  const AdamWConfig<T>& config() const { return cfg_; }

  void step() {
    ++t_;
    T bc1 = T(1) - std::pow(cfg_.beta1, static_cast<T>(t_));
    T bc2 = T(1) - std::pow(cfg_.beta2, static_cast<T>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i].second;
      if (!p.has_grad()) continue;
      auto& val = p.data();
      const auto& g = p.raw()->grad;
      auto& m = m_[i];
      auto& v = v_[i];
      int64_t n = p.numel();
      for (int64_t j = 0; j < n; ++j) {
        val[j] -= cfg_.lr * cfg_.weight_decay * val[j];
        m[j] = cfg_.beta1 * m[j] + (T(1) - cfg_.beta1) * g[j];
        v[j] = cfg_.beta2 * v[j] + (T(1) - cfg_.beta2) * g[j] * g[j];
        T mh = m[j] / bc1;
        T vh = v[j] / bc2;
        val[j] -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
      }
    }
  }

  void zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
  }

  int64_t step_count() const { return t_; }
  void set_step_count(int64_t t) { t_ = t; }
  size_t param_count() const { return params_.size(); }
  const std::string& param_name(size_t i) const { return params_[i].first; }
  std::vector<T>& moment1(size_t i) { return m_[i]; }
  std::vector<T>& moment2(size_t i) { return v_[i]; }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> params_;
  AdamWConfig<T> cfg_;
  std::vector<std::vector<T>> m_, v_;
  int64_t t_ = 0;
};

}  // namespace mmae::nn
