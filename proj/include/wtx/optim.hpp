#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "wtx/errors.hpp"
#include "wtx/layers.hpp"

namespace wtx {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

/// AdamW with decoupled weight decay and bias-corrected moments. Moment
/// buffers are bound to parameter position: always pass the same list.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  [[nodiscard]] const AdamWConfig& config() const { return cfg_; }
  [[nodiscard]] std::uint64_t steps() const { return step_; }

  void step(const std::vector<Parameter*>& params) {
    init_buffers(params);
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto w = params[k]->value.values();
      auto g = params[k]->grad.values();
      auto m = m_[k].values();
      auto v = v_[k].values();
      for (std::size_t i = 0; i < w.size(); ++i) {
        w[i] -= cfg_.lr * cfg_.weight_decay * w[i];
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        w[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

 private:
  void init_buffers(const std::vector<Parameter*>& params) {
    if (m_.empty()) {
      for (auto* p : params) {
        m_.emplace_back(p->value.rows(), p->value.cols());
        v_.emplace_back(p->value.rows(), p->value.cols());
      }
    }
    if (m_.size() != params.size()) throw ShapeError("adamw: parameter list changed size");
    for (std::size_t k = 0; k < params.size(); ++k) {
      require_same_shape(params[k]->value, m_[k], "adamw buffer");
      require_same_shape(params[k]->value, params[k]->grad, "adamw gradient");
    }
  }

  AdamWConfig cfg_;
  std::uint64_t step_ = 0;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
};

struct SgdConfig {
  double lr = 2e-2;
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

/// Classic SGD with momentum and coupled L2 decay:
/// v <- mu v + g + wd w;  w <- w - lr v.
class SgdMomentum {
 public:
  explicit SgdMomentum(SgdConfig cfg = {}) : cfg_(cfg) {}

  [[nodiscard]] const SgdConfig& config() const { return cfg_; }
  [[nodiscard]] std::uint64_t steps() const { return step_; }
  [[nodiscard]] const std::vector<Matrix>& velocity() const { return vel_; }

  void step(const std::vector<Parameter*>& params) {
    if (vel_.empty())
      for (auto* p : params) vel_.emplace_back(p->value.rows(), p->value.cols());
    if (vel_.size() != params.size()) throw ShapeError("sgd: parameter list changed size");
    ++step_;
    for (std::size_t k = 0; k < params.size(); ++k) {
      require_same_shape(params[k]->value, vel_[k], "sgd buffer");
      require_same_shape(params[k]->value, params[k]->grad, "sgd gradient");
      auto w = params[k]->value.values();
      auto g = params[k]->grad.values();
      auto v = vel_[k].values();
      for (std::size_t i = 0; i < w.size(); ++i) {
        v[i] = cfg_.momentum * v[i] + g[i] + cfg_.weight_decay * w[i];
        w[i] -= cfg_.lr * v[i];
      }
    }
  }

 private:
  SgdConfig cfg_;
  std::uint64_t step_ = 0;
  std::vector<Matrix> vel_;
};

}  // namespace wtx
