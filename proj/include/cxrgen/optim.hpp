#pragma once

// Adam with bias correction, plus global-norm gradient clipping.

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cxrgen/tensor.hpp"

namespace cxrgen {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamStepReport {
  std::size_t updated = 0;
  std::vector<std::size_t> rejected;  // parameter positions with non-finite gradients
};

class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    if (!(cfg_.lr > 0.0)) throw std::invalid_argument("adam: learning rate must be positive");
    for (const auto& p : params_) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }

  const AdamConfig& config() const { return cfg_; }
  const std::vector<Tensor>& params() const { return params_; }
  std::uint64_t steps() const { return t_; }

  // Applies one update from the accumulated gradients. Tensors that do not
  // require grad, or have no gradient, are left alone. A tensor whose
  // gradient has a non-finite entry is skipped entirely.
  AdamStepReport step() {
    ++t_;
    AdamStepReport report;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Tensor& p = params_[k];
      if (!p.requires_grad() || !p.has_grad()) continue;
      const auto g = p.grad();
      bool finite = true;
      for (double x : g) finite = finite && std::isfinite(x);
      if (!finite) {
        report.rejected.push_back(k);
        continue;
      }
      auto w = p.mutable_data();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        w[i] -= cfg_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
      }
      ++report.updated;
    }
    return report;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::vector<std::vector<double>>& first_moments() { return m_; }
  std::vector<std::vector<double>>& second_moments() { return v_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }
  void set_steps(std::uint64_t t) { t_ = t; }

 private:
  std::vector<Tensor> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::uint64_t t_ = 0;
};

// L2 norm over the finite gradients of all given tensors.
inline double global_grad_norm(std::span<const Tensor> params) {
  double s = 0.0;
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    double local = 0.0;
    for (double g : p.grad()) local += g * g;
    if (std::isfinite(local)) s += local;
  }
  return std::sqrt(s);
}

// Rescales gradients so their global norm is at most max_norm. Returns the
// norm before clipping.
inline double clip_grad_norm(std::span<Tensor> params, double max_norm) {
  const double n = global_grad_norm(params);
  if (max_norm > 0.0 && n > max_norm) {
    const double f = max_norm / n;
    for (auto& p : params) {
      if (!p.has_grad()) continue;
      for (auto& g : p.mutable_grad()) g *= f;
    }
  }
  return n;
}

}  // namespace cxrgen
