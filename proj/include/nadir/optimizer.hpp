// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "nadir/model.hpp"

namespace nadir {

// Linear warmup to base_lr over round(warmup_fraction * total) steps, then
// linear decay to 0 at total_steps. Continuous and piecewise linear.
inline double lr_at(std::size_t step, std::size_t total_steps, double base_lr,
                    double warmup_fraction) {
  if (total_steps == 0) throw ConfigError("lr_at: total_steps must be > 0");
  if (step > total_steps) throw ConfigError("lr_at: step beyond total_steps");
  if (warmup_fraction < 0.0 || warmup_fraction >= 1.0)
    throw ConfigError("lr_at: warmup_fraction must be in [0, 1)");
  std::size_t warm = static_cast<std::size_t>(
      std::llround(warmup_fraction * static_cast<double>(total_steps)));
  if (step <= warm && warm > 0)
    return base_lr * static_cast<double>(step) / static_cast<double>(warm);
  if (total_steps == warm) return 0.0;
  return base_lr * static_cast<double>(total_steps - step) /
         static_cast<double>(total_steps - warm);
}

// Decoupled-weight-decay Adam. Decay is applied to the parameter before the
// bias-corrected moment update, scaled by the current learning rate.
template <typename T>
class AdamW {
 public:
  AdamW(double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  std::size_t step_count() const { return t_; }

  void zero_grad(ParamRegistry<T>& reg) {
    for (auto& [name, p] : reg.items) p.zero_grad();
  }

  void step(ParamRegistry<T>& reg, double lr) {
    if (m_.size() != reg.items.size()) {
      m_.resize(reg.items.size());
      v_.resize(reg.items.size());
      for (std::size_t i = 0; i < reg.items.size(); ++i) {
        m_[i].assign(reg.items[i].second.size(), T(0));
        v_[i].assign(reg.items[i].second.size(), T(0));
      }
    }
    ++t_;
    const T b1 = static_cast<T>(beta1_), b2 = static_cast<T>(beta2_);
    const T bc1 = T(1) - static_cast<T>(std::pow(beta1_, static_cast<double>(t_)));
    const T bc2 = T(1) - static_cast<T>(std::pow(beta2_, static_cast<double>(t_)));
    for (std::size_t i = 0; i < reg.items.size(); ++i) {
      auto& [name, p] = reg.items[i];
      p.ensure_grad();
      const std::vector<T>& gr = p.grad();
      std::vector<T>& val = p.data();
      for (std::size_t j = 0; j < gr.size(); ++j)
        if (!std::isfinite(gr[j]))
          throw InvariantError("adamw_step: non-finite gradient in parameter '" + name + "'");
      const T decay = static_cast<T>(lr * wd_);
      T* m = m_[i].data();
      T* v = v_[i].data();
      for (std::size_t j = 0; j < val.size(); ++j) {
        val[j] -= decay * val[j];
        m[j] = b1 * m[j] + (T(1) - b1) * gr[j];
        v[j] = b2 * v[j] + (T(1) - b2) * gr[j] * gr[j];
        T mhat = m[j] / bc1;
        T vhat = v[j] / bc2;
        val[j] -= static_cast<T>(lr) * mhat / (std::sqrt(vhat) + static_cast<T>(eps_));
      }
    }
  }

  // Global-norm gradient clipping (off unless max_norm > 0).
  static void clip_grad_norm(ParamRegistry<T>& reg, double max_norm) {
    if (max_norm <= 0.0) return;
    double sq = 0.0;
    for (auto& [name, p] : reg.items) {
      p.ensure_grad();
      for (T gv : p.grad()) sq += static_cast<double>(gv) * static_cast<double>(gv);
    }
    double norm = std::sqrt(sq);
    if (norm <= max_norm) return;
    T s = static_cast<T>(max_norm / norm);
    for (auto& [name, p] : reg.items)
      for (T& gv : p.grad()) gv *= s;
  }

 private:
  std::vector<std::vector<T>> m_, v_;
  std::size_t t_ = 0;
  double wd_, beta1_, beta2_, eps_;
};

}  // namespace nadir
