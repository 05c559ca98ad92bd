#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "wtx/bench.hpp"
#include "wtx/layers.hpp"
#include "wtx/losses.hpp"
#include "wtx/matrix.hpp"
#include "wtx/model.hpp"
#include "wtx/train.hpp"

namespace wtx {

/// Outcome of comparing analytic gradients with central differences.
struct GradCheckResult {
  std::string name;
  std::uint64_t seed = 0;
  std::size_t entries = 0;
  double max_rel_error = 0.0;

  [[nodiscard]] bool passed(double tol) const { return max_rel_error < tol; }
};

inline nlohmann::json to_json(const GradCheckResult& r) {
  return {{"name", r.name},
          {"seed", r.seed},
          {"entries", r.entries},
          {"max_rel_error", r.max_rel_error}};
}

inline constexpr double kGradStep = 1e-6;
inline constexpr double kGradTolerance = 1e-4;

/// |a - n| / max(|a|, |n|, floor). Entries below the floor are held to an
/// absolute tolerance of floor * tol. A central difference with h = 1e-6 on an
/// O(1) loss carries ~1e-9 of round-off, so purely relative comparison is
/// meaningless for gradients near zero (e.g. GroupNorm over two channels,
/// whose input gradient is of order epsilon).
inline double relative_error(double analytic, double numeric, double floor = 1e-3) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

namespace detail {

/// Central difference of `f` with respect to every entry of `m`, compared
/// against `analytic`. `m` is restored after each probe.
inline void probe(Matrix& m, const Matrix& analytic, const std::function<double()>& f, double h,
                  GradCheckResult& out) {
  for (std::size_t i = 0; i < m.size(); ++i) {
    double& v = m.values()[i];
    const double keep = v;
    v = keep + h;
    const double fp = f();
    v = keep - h;
    const double fm = f();
    v = keep;
    const double numeric = (fp - fm) / (2.0 * h);
    out.max_rel_error =
        std::max(out.max_rel_error, relative_error(analytic.values()[i], numeric));
    ++out.entries;
  }
}

inline double weighted_sum(const Matrix& y, const Matrix& r) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y.values()[i] * r.values()[i];
  return s;
}

}  // namespace detail

/// Checks a layer's input and parameter gradients on f(x) = sum(layer(x) * R)
/// for a fixed random R.
inline GradCheckResult check_layer(Layer& layer, Matrix x, Rng& rng, const std::string& name,
                                   double h = kGradStep) {
  GradCheckResult out;
  out.name = name;
  out.seed = rng.seed();
  const Matrix y0 = layer.forward(x);
  const Matrix r = gaussian_sample(rng, y0.rows(), y0.cols(), 0.0, 1.0);
  auto params = layer.parameters();
  zero_grad(params);
  layer.forward(x);
  const Matrix dx = layer.backward(r);
  std::vector<Matrix> dparams;
  for (auto* p : params) dparams.push_back(p->grad);

  auto f = [&] { return detail::weighted_sum(layer.forward(x), r); };
  detail::probe(x, dx, f, h, out);
  for (std::size_t k = 0; k < params.size(); ++k) detail::probe(params[k]->value, dparams[k], f, h, out);
  return out;
}

/// Checks d(loss)/d(pred) for a loss of the form loss(pred, target).
inline GradCheckResult check_loss(const std::function<LossValue(const Matrix&, const Matrix&)>& loss,
                                  Matrix pred, const Matrix& target, const std::string& name,
                                  std::uint64_t seed, double h = kGradStep) {
  GradCheckResult out;
  out.name = name;
  out.seed = seed;
  const Matrix g = loss(pred, target).gradient;
  detail::probe(pred, g, [&] { return loss(pred, target).value; }, h, out);
  return out;
}

/// Miniature joint problem used by the end-to-end check.
struct MiniProblem {
  SourceWeights source;
  Batch batch;
  std::size_t num_other = 0;
};

/// |C| = 6, |S| = 3, d = 8, two "other" classes, batch of 4 multi-hot rows.
inline MiniProblem mini_problem(std::uint64_t seed) {
  Rng rng(seed);
  MiniProblem p;
  const std::size_t n_c = 6, d = 8;
  p.num_other = 2;
  p.source.weights = gaussian_sample(rng, n_c, d, 0.0, 1.0);
  p.source.shared_mask = {true, false, true, false, true, false};
  p.batch.features = gaussian_sample(rng, 4, d, 0.0, 1.0);
  p.batch.labels = Matrix(4, 3 + p.num_other);
  for (std::size_t i = 0; i < 4; ++i) {
    p.batch.labels(i, rng.uniform_index(3 + p.num_other)) = 1.0;
    if (rng.uniform() < 0.3) p.batch.labels(i, rng.uniform_index(3 + p.num_other)) = 1.0;
  }
  return p;
}

/// Gradient of the total joint loss with respect to every transfer-model
/// parameter and the "other" weights, for the given architecture.
inline GradCheckResult check_end_to_end(const std::string& method, std::uint64_t seed,
                                        double alpha = 20.0, double h = kGradStep) {
  const MiniProblem p = mini_problem(seed);
  ArchSpec arch = method_arch(method);
  arch.dropout = 0.0;  // stochastic masks have no finite-difference gradient
  const ModelDims dims{8, 8, 8, 2};
  TransferModel model = build_model(arch, dims, seed, p.source.weights);
  Rng head_rng = Rng(seed).fork(12);
  DetectionProxyHead head(p.num_other, 8, 0.5, head_rng);
  model.encoder().set_training(true);

  auto params = model.parameters();
  params.push_back(&head.other);
  zero_grad(params);
  joint_loss_gradients(model, head, p.source, p.batch, alpha);
  std::vector<Matrix> analytic;
  for (auto* q : params) analytic.push_back(q->grad);

  GradCheckResult out;
  out.name = "end_to_end/" + method;
  out.seed = seed;
  auto f = [&] {
    return joint_loss_gradients(model, head, p.source, p.batch, alpha).total;
  };
  for (std::size_t k = 0; k < params.size(); ++k) detail::probe(params[k]->value, analytic[k], f, h, out);
  return out;
}

/// Inputs for layer checks that keep ReLU pre-activations away from the kink.
inline Matrix away_from_zero(Rng& rng, std::size_t rows, std::size_t cols, double margin = 0.05) {
  Matrix x = gaussian_sample(rng, rows, cols, 0.0, 1.0);
  for (double& v : x.values())
    if (std::abs(v) < margin) v = v < 0.0 ? v - margin : v + margin;
  return x;
}

/// The full suite: each layer kind, both losses and the end-to-end model,
/// repeated for `seeds` seeds starting at `first_seed`.
inline std::vector<GradCheckResult> run_gradcheck_suite(std::size_t seeds,
                                                        std::uint64_t first_seed = 1) {
  std::vector<GradCheckResult> out;
  for (std::uint64_t s = first_seed; s < first_seed + seeds; ++s) {
    Rng rng(s);
    {
      Rng init = rng.fork(1);
      LinearLayer l(7, 5, init);
      for (double& b : l.bias().value.values()) b = rng.normal();
      out.push_back(check_layer(l, gaussian_sample(rng, 4, 7, 0.0, 1.0), rng, "linear"));
    }
    {
      ReluLayer l;
      out.push_back(check_layer(l, away_from_zero(rng, 4, 6), rng, "relu"));
    }
    {
      const Matrix w = gaussian_sample(rng, 10, 6, 0.3, 2.0);
      InputStandardizer l = InputStandardizer::fit(w, 1e-5);
      out.push_back(check_layer(l, gaussian_sample(rng, 4, 6, 0.0, 1.0), rng, "standardizer"));
    }
    {
      GroupNormLayer l(8, 2);
      for (double& g : l.gamma().value.values()) g = rng.uniform(0.5, 1.5);
      for (double& b : l.beta().value.values()) b = rng.normal();
      out.push_back(check_layer(l, gaussian_sample(rng, 3, 8, 0.5, 1.5), rng, "groupnorm"));
    }
    {
      ClassBatchNorm l(5);
      for (double& g : l.gamma().value.values()) g = rng.uniform(0.5, 1.5);
      for (double& b : l.beta().value.values()) b = rng.normal();
      out.push_back(check_layer(l, gaussian_sample(rng, 6, 5, -0.2, 1.3), rng, "classbn"));
    }
    {
      Matrix pred = gaussian_sample(rng, 5, 4, 0.0, 1.5);
      Matrix target = gaussian_sample(rng, 5, 4, 0.0, 1.5);
      // keep residuals off the |r| = 1 switch point
      for (std::size_t i = 0; i < pred.size(); ++i) {
        const double r = pred.values()[i] - target.values()[i];
        if (std::abs(std::abs(r) - 1.0) < 1e-3) pred.values()[i] += 0.01;
      }
      out.push_back(check_loss(smooth_l1, pred, target, "smooth_l1", s));
    }
    {
      Matrix logits = gaussian_sample(rng, 5, 4, 0.0, 3.0);
      Matrix target(5, 4);
      for (double& t : target.values()) t = rng.uniform() < 0.4 ? 1.0 : 0.0;
      out.push_back(check_loss(sigmoid_bce, logits, target, "sigmoid_bce", s));
    }
    for (const char* m : {"wtn", "wtn_plus", "ae_wtn", "wtn_plus_classbn", "wtn_plus_activity"})
      out.push_back(check_end_to_end(m, s));
  }
  return out;
}

}  // namespace wtx
