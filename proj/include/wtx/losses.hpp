#pragma once

#include <cmath>

#include "wtx/errors.hpp"
#include "wtx/matrix.hpp"

namespace wtx {

/// Scalar loss together with its gradient w.r.t. the loss input.
struct LossValue {
  double value = 0.0;
  Matrix gradient;
};

/// Smooth-L1 (Huber with unit threshold) on r = pred - target:
/// 0.5 r^2 for |r| < 1, |r| - 0.5 otherwise. Mean over all elements.
inline LossValue smooth_l1(const Matrix& pred, const Matrix& target) {
  require_same_shape(pred, target, "smooth_l1");
  LossValue out{0.0, Matrix(pred.rows(), pred.cols())};
  if (pred.empty()) return out;
  const auto n = static_cast<double>(pred.size());
  auto p = pred.values();
  auto t = target.values();
  auto g = out.gradient.values();
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double r = p[i] - t[i];
    const double a = std::abs(r);
    if (a < 1.0) {
      sum += 0.5 * r * r;
      g[i] = r / n;
    } else {
      sum += a - 0.5;
      g[i] = (r > 0.0 ? 1.0 : -1.0) / n;
    }
  }
  out.value = sum / n;
  if (!std::isfinite(out.value)) throw NumericError("smooth_l1: non-finite loss");
  return out;
}

/// Numerically stable sigmoid.
inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// Sigmoid binary cross-entropy averaged over all elements, evaluated as
/// max(z, 0) - z t + log1p(exp(-|z|)).
inline LossValue sigmoid_bce(const Matrix& logits, const Matrix& targets) {
  require_same_shape(logits, targets, "sigmoid_bce");
  LossValue out{0.0, Matrix(logits.rows(), logits.cols())};
  if (logits.empty()) return out;
  const auto n = static_cast<double>(logits.size());
  auto z = logits.values();
  auto t = targets.values();
  auto g = out.gradient.values();
  double sum = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (t[i] != 0.0 && t[i] != 1.0) throw DomainError("sigmoid_bce: targets must be 0 or 1");
    sum += std::max(z[i], 0.0) - z[i] * t[i] + std::log1p(std::exp(-std::abs(z[i])));
    g[i] = (sigmoid(z[i]) - t[i]) / n;
  }
  out.value = sum / n;
  if (!std::isfinite(out.value)) throw NumericError("sigmoid_bce: non-finite loss");
  return out;
}

/// l_cls + alpha * l_rec. The two inputs may be taken w.r.t. different
/// tensors, so gradients are returned scaled but not summed; callers route
/// each into its own branch.
struct TotalLoss {
  double value = 0.0;
  Matrix cls_gradient;
  Matrix rec_gradient;
};

inline TotalLoss total_loss(const LossValue& cls, const LossValue& rec, double alpha) {
  if (!(alpha >= 0.0)) throw ConfigError("total_loss: alpha must be non-negative");
  return TotalLoss{cls.value + alpha * rec.value, cls.gradient, rec.gradient * alpha};
}

}  // namespace wtx
