#pragma once

#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "wtx/errors.hpp"
#include "wtx/matrix.hpp"

namespace wtx {

/// A learnable tensor and its accumulated gradient.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  Parameter() = default;
  Parameter(std::string n, Matrix v)
      : name(std::move(n)), value(std::move(v)), grad(value.rows(), value.cols()) {}
};

inline void zero_grad(const std::vector<Parameter*>& params) {
  for (auto* p : params) p->grad.fill(0.0);
}

/// Differentiable layer with a manual backward pass. A forward call caches
/// whatever the matching backward needs; one forward/backward pair at a time.
class Layer {
 public:
  virtual ~Layer() = default;

  virtual Matrix forward(const Matrix& x) = 0;
  /// Returns d(loss)/d(input) and accumulates parameter gradients.
  virtual Matrix backward(const Matrix& upstream) = 0;

  virtual std::vector<Parameter*> parameters() { return {}; }
  [[nodiscard]] virtual std::unique_ptr<Layer> clone() const = 0;
  [[nodiscard]] virtual std::string kind() const = 0;

  /// Only dropout distinguishes training from inference.
  virtual void set_training(bool) {}
};

namespace detail {
inline void require_forward(bool cached, const std::string& kind) {
  if (!cached) throw StateError(kind + ": backward called before forward");
}
inline void require_upstream(const Matrix& g, std::size_t rows, std::size_t cols,
                             const std::string& kind) {
  if (g.rows() != rows || g.cols() != cols) {
    throw ShapeError(kind + ": upstream gradient " + g.shape() + " does not match output " +
                     Matrix::shape_string(rows, cols));
  }
}
}  // namespace detail

class LinearLayer final : public Layer {
 public:
  LinearLayer(std::size_t in_dim, std::size_t out_dim, std::string name = "linear")
      : weight_(name + ".weight", Matrix(out_dim, in_dim)),
        bias_(name + ".bias", Matrix(out_dim, 1)) {}

  /// He-uniform weights, zero bias.
  LinearLayer(std::size_t in_dim, std::size_t out_dim, Rng& rng, std::string name = "linear")
      : LinearLayer(in_dim, out_dim, std::move(name)) {
    const double bound = std::sqrt(6.0 / static_cast<double>(in_dim));
    for (double& w : weight_.value.values()) w = rng.uniform(-bound, bound);
  }

  [[nodiscard]] std::size_t in_dim() const { return weight_.value.cols(); }
  [[nodiscard]] std::size_t out_dim() const { return weight_.value.rows(); }

  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }
  [[nodiscard]] const Parameter& weight() const { return weight_; }
  [[nodiscard]] const Parameter& bias() const { return bias_; }

  Matrix forward(const Matrix& x) override {
    if (x.cols() != in_dim()) {
      throw ShapeError("linear: input " + x.shape() + " expects " + std::to_string(in_dim()) +
                       " columns");
    }
    Matrix y = matmul_bt(x, weight_.value);
    for (std::size_t i = 0; i < y.rows(); ++i)
      for (std::size_t j = 0; j < y.cols(); ++j) y(i, j) += bias_.value(j, 0);
    input_ = x;
    return y;
  }

  Matrix backward(const Matrix& g) override {
    detail::require_forward(input_.has_value(), kind());
    detail::require_upstream(g, input_->rows(), out_dim(), kind());
    weight_.grad += matmul_at(g, *input_);
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) bias_.grad(j, 0) += g(i, j);
    return matmul(g, weight_.value);
  }

  std::vector<Parameter*> parameters() override { return {&weight_, &bias_}; }
  [[nodiscard]] std::unique_ptr<Layer> clone() const override {
    return std::make_unique<LinearLayer>(*this);
  }
  [[nodiscard]] std::string kind() const override { return "linear"; }

 private:
  Parameter weight_;
  Parameter bias_;
  std::optional<Matrix> input_;
};

class ReluLayer final : public Layer {
 public:
  Matrix forward(const Matrix& x) override {
    Matrix y = x;
    for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
    input_ = x;
    return y;
  }

  Matrix backward(const Matrix& g) override {
    detail::require_forward(input_.has_value(), kind());
    detail::require_upstream(g, input_->rows(), input_->cols(), kind());
    Matrix dx = g;
    auto in = input_->values();
    auto d = dx.values();
    for (std::size_t i = 0; i < d.size(); ++i)
      if (!(in[i] > 0.0)) d[i] = 0.0;
    return dx;
  }

  [[nodiscard]] std::unique_ptr<Layer> clone() const override {
    return std::make_unique<ReluLayer>(*this);
  }
  [[nodiscard]] std::string kind() const override { return "relu"; }

 private:
  std::optional<Matrix> input_;
};

/// Frozen per-channel standardization (x - mu) / (sigma + eps). Statistics are
/// fitted once over a class-weight matrix and never updated.
class InputStandardizer final : public Layer {
 public:
  InputStandardizer(std::vector<double> mu, std::vector<double> sigma, double epsilon)
      : mu_(std::move(mu)), sigma_(std::move(sigma)), epsilon_(epsilon) {
    if (mu_.size() != sigma_.size()) throw ShapeError("standardizer: mu/sigma length mismatch");
    for (double s : sigma_) {
      if (!(s >= 0.0) || !(s + epsilon_ > 0.0)) {
        throw DomainError("standardizer: sigma + epsilon must be positive");
      }
    }
  }

  /// Population mean / standard deviation of each column.
  static InputStandardizer fit(const Matrix& weights, double epsilon) {
    if (weights.rows() < 2) throw DomainError("standardizer: need at least 2 rows to fit");
    const auto n = static_cast<double>(weights.rows());
    std::vector<double> mu(weights.cols(), 0.0), sigma(weights.cols(), 0.0);
    for (std::size_t i = 0; i < weights.rows(); ++i)
      for (std::size_t j = 0; j < weights.cols(); ++j) mu[j] += weights(i, j);
    for (double& m : mu) m /= n;
    for (std::size_t i = 0; i < weights.rows(); ++i)
      for (std::size_t j = 0; j < weights.cols(); ++j) {
        const double d = weights(i, j) - mu[j];
        sigma[j] += d * d;
      }
    for (double& s : sigma) s = std::sqrt(s / n);
    return InputStandardizer(std::move(mu), std::move(sigma), epsilon);
  }

  [[nodiscard]] const std::vector<double>& mu() const { return mu_; }
  [[nodiscard]] const std::vector<double>& sigma() const { return sigma_; }
  [[nodiscard]] double epsilon() const { return epsilon_; }
  [[nodiscard]] std::size_t dim() const { return mu_.size(); }

  [[nodiscard]] Matrix apply(const Matrix& x) const {
    check_cols(x);
    Matrix y(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < x.cols(); ++j)
        y(i, j) = (x(i, j) - mu_[j]) / (sigma_[j] + epsilon_);
    return y;
  }

  /// Inverse map back to the raw weight space.
  [[nodiscard]] Matrix invert(const Matrix& z) const {
    check_cols(z);
    Matrix y(z.rows(), z.cols());
    for (std::size_t i = 0; i < z.rows(); ++i)
      for (std::size_t j = 0; j < z.cols(); ++j)
        y(i, j) = z(i, j) * (sigma_[j] + epsilon_) + mu_[j];
    return y;
  }

  Matrix forward(const Matrix& x) override {
    Matrix y = apply(x);
    rows_ = x.rows();
    return y;
  }

  Matrix backward(const Matrix& g) override {
    detail::require_forward(rows_.has_value(), kind());
    detail::require_upstream(g, *rows_, dim(), kind());
    Matrix dx = g;
    for (std::size_t i = 0; i < dx.rows(); ++i)
      for (std::size_t j = 0; j < dx.cols(); ++j) dx(i, j) /= (sigma_[j] + epsilon_);
    return dx;
  }

  [[nodiscard]] std::unique_ptr<Layer> clone() const override {
    return std::make_unique<InputStandardizer>(*this);
  }
  [[nodiscard]] std::string kind() const override { return "standardizer"; }

 private:
  void check_cols(const Matrix& x) const {
    if (x.cols() != dim()) {
      throw ShapeError("standardizer: input " + x.shape() + " expects " +
                       std::to_string(dim()) + " columns");
    }
  }

  std::vector<double> mu_;
  std::vector<double> sigma_;
  double epsilon_;
  std::optional<std::size_t> rows_;
};

/// Frozen inverse of an InputStandardizer: z * (sigma + eps) + mu. Closes the
/// decoder so reconstructions live in the raw source-weight space.
class InverseStandardizer final : public Layer {
 public:
  explicit InverseStandardizer(InputStandardizer s) : s_(std::move(s)) {}

  Matrix forward(const Matrix& z) override {
    Matrix y = s_.invert(z);
    rows_ = z.rows();
    return y;
  }

  Matrix backward(const Matrix& g) override {
    detail::require_forward(rows_.has_value(), kind());
    detail::require_upstream(g, *rows_, s_.dim(), kind());
    Matrix dz = g;
    for (std::size_t i = 0; i < dz.rows(); ++i)
      for (std::size_t j = 0; j < dz.cols(); ++j) dz(i, j) *= (s_.sigma()[j] + s_.epsilon());
    return dz;
  }

  [[nodiscard]] std::unique_ptr<Layer> clone() const override {
    return std::make_unique<InverseStandardizer>(*this);
  }
  [[nodiscard]] std::string kind() const override { return "inverse_standardizer"; }

 private:
  InputStandardizer s_;
  std::optional<std::size_t> rows_;
};

namespace detail {

// Shared machinery for GroupNorm and ClassBatchNorm: normalize a set of
// disjoint index slices, then apply a per-channel affine transform.
struct NormCache {
  Matrix xhat;
  std::vector<double> inv_std;  // one per slice
};

}  // namespace detail

/// Group normalization over the channel axis of a [batch x channels] input.
/// Each (row, group) slice is standardized with population variance.
class GroupNormLayer final : public Layer {
 public:
  GroupNormLayer(std::size_t channels, std::size_t groups, double epsilon = 1e-5,
                 std::string name = "groupnorm")
      : groups_(groups),
        epsilon_(epsilon),
        gamma_(name + ".gamma", Matrix(1, channels, 1.0)),
        beta_(name + ".beta", Matrix(1, channels, 0.0)) {
    if (groups == 0 || channels % groups != 0) {
      throw ConfigError("groupnorm: " + std::to_string(channels) +
                        " channels not divisible into " + std::to_string(groups) + " groups");
    }
  }

  [[nodiscard]] std::size_t channels() const { return gamma_.value.cols(); }
  [[nodiscard]] std::size_t groups() const { return groups_; }
  [[nodiscard]] double epsilon() const { return epsilon_; }
  Parameter& gamma() { return gamma_; }
  Parameter& beta() { return beta_; }

  /// Pre-affine normalized output of the last forward call.
  [[nodiscard]] const Matrix& normalized() const {
    detail::require_forward(cache_.has_value(), kind());
    return cache_->xhat;
  }

  Matrix forward(const Matrix& x) override {
    if (x.cols() != channels()) {
      throw ShapeError("groupnorm: input " + x.shape() + " expects " +
                       std::to_string(channels()) + " channels");
    }
    const std::size_t gs = channels() / groups_;
    detail::NormCache c{Matrix(x.rows(), x.cols()), std::vector<double>(x.rows() * groups_)};
    Matrix y(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
      for (std::size_t g = 0; g < groups_; ++g) {
        const std::size_t lo = g * gs;
        double mean = 0.0;
        for (std::size_t j = lo; j < lo + gs; ++j) mean += x(i, j);
        mean /= static_cast<double>(gs);
        double var = 0.0;
        for (std::size_t j = lo; j < lo + gs; ++j) {
          const double d = x(i, j) - mean;
          var += d * d;
        }
        var /= static_cast<double>(gs);
        const double inv = 1.0 / std::sqrt(var + epsilon_);
        c.inv_std[i * groups_ + g] = inv;
        for (std::size_t j = lo; j < lo + gs; ++j) {
          const double xh = (x(i, j) - mean) * inv;
          c.xhat(i, j) = xh;
          y(i, j) = gamma_.value(0, j) * xh + beta_.value(0, j);
        }
      }
    }
    cache_ = std::move(c);
    return y;
  }

  Matrix backward(const Matrix& g) override {
    detail::require_forward(cache_.has_value(), kind());
    const Matrix& xhat = cache_->xhat;
    detail::require_upstream(g, xhat.rows(), xhat.cols(), kind());
    const std::size_t gs = channels() / groups_;
    const auto m = static_cast<double>(gs);
    Matrix dx(g.rows(), g.cols());
    for (std::size_t i = 0; i < g.rows(); ++i) {
      for (std::size_t j = 0; j < g.cols(); ++j) {
        gamma_.grad(0, j) += g(i, j) * xhat(i, j);
        beta_.grad(0, j) += g(i, j);
      }
      for (std::size_t grp = 0; grp < groups_; ++grp) {
        const std::size_t lo = grp * gs;
        double sum_d = 0.0, sum_dx = 0.0;
        for (std::size_t j = lo; j < lo + gs; ++j) {
          const double d = g(i, j) * gamma_.value(0, j);
          sum_d += d;
          sum_dx += d * xhat(i, j);
        }
        const double inv = cache_->inv_std[i * groups_ + grp];
        for (std::size_t j = lo; j < lo + gs; ++j) {
          const double d = g(i, j) * gamma_.value(0, j);
          dx(i, j) = inv / m * (m * d - sum_d - xhat(i, j) * sum_dx);
        }
      }
    }
    return dx;
  }

  std::vector<Parameter*> parameters() override { return {&gamma_, &beta_}; }
  [[nodiscard]] std::unique_ptr<Layer> clone() const override {
    return std::make_unique<GroupNormLayer>(*this);
  }
  [[nodiscard]] std::string kind() const override { return "groupnorm"; }

 private:
  std::size_t groups_;
  double epsilon_;
  Parameter gamma_;
  Parameter beta_;
  std::optional<detail::NormCache> cache_;
};

/// Batch normalization where the batch is the set of classes presented:
/// each channel is standardized over the rows of the input. No running
/// statistics; inference uses the statistics of the presented class batch.
class ClassBatchNorm final : public Layer {
 public:
  ClassBatchNorm(std::size_t channels, double epsilon = 1e-5, std::string name = "classbn")
      : epsilon_(epsilon),
        gamma_(name + ".gamma", Matrix(1, channels, 1.0)),
        beta_(name + ".beta", Matrix(1, channels, 0.0)) {}

  [[nodiscard]] std::size_t channels() const { return gamma_.value.cols(); }
  Parameter& gamma() { return gamma_; }
  Parameter& beta() { return beta_; }

  [[nodiscard]] const Matrix& normalized() const {
    detail::require_forward(cache_.has_value(), kind());
    return cache_->xhat;
  }

  Matrix forward(const Matrix& x) override {
    if (x.cols() != channels()) {
      throw ShapeError("classbn: input " + x.shape() + " expects " +
                       std::to_string(channels()) + " channels");
    }
    if (x.rows() < 2) throw DomainError("classbn: need at least 2 classes in the batch");
    const auto n = static_cast<double>(x.rows());
    detail::NormCache c{Matrix(x.rows(), x.cols()), std::vector<double>(x.cols())};
    Matrix y(x.rows(), x.cols());
    for (std::size_t j = 0; j < x.cols(); ++j) {
      double mean = 0.0;
      for (std::size_t i = 0; i < x.rows(); ++i) mean += x(i, j);
      mean /= n;
      double var = 0.0;
      for (std::size_t i = 0; i < x.rows(); ++i) {
        const double d = x(i, j) - mean;
        var += d * d;
      }
      var /= n;
      const double inv = 1.0 / std::sqrt(var + epsilon_);
      c.inv_std[j] = inv;
      for (std::size_t i = 0; i < x.rows(); ++i) {
        const double xh = (x(i, j) - mean) * inv;
        c.xhat(i, j) = xh;
        y(i, j) = gamma_.value(0, j) * xh + beta_.value(0, j);
      }
    }
    cache_ = std::move(c);
    return y;
  }

  Matrix backward(const Matrix& g) override {
    detail::require_forward(cache_.has_value(), kind());
    const Matrix& xhat = cache_->xhat;
    detail::require_upstream(g, xhat.rows(), xhat.cols(), kind());
    const auto n = static_cast<double>(g.rows());
    Matrix dx(g.rows(), g.cols());
    for (std::size_t j = 0; j < g.cols(); ++j) {
      double sum_d = 0.0, sum_dx = 0.0;
      for (std::size_t i = 0; i < g.rows(); ++i) {
        gamma_.grad(0, j) += g(i, j) * xhat(i, j);
        beta_.grad(0, j) += g(i, j);
        const double d = g(i, j) * gamma_.value(0, j);
        sum_d += d;
        sum_dx += d * xhat(i, j);
      }
      const double inv = cache_->inv_std[j];
      for (std::size_t i = 0; i < g.rows(); ++i) {
        const double d = g(i, j) * gamma_.value(0, j);
        dx(i, j) = inv / n * (n * d - sum_d - xhat(i, j) * sum_dx);
      }
    }
    return dx;
  }

  std::vector<Parameter*> parameters() override { return {&gamma_, &beta_}; }
  [[nodiscard]] std::unique_ptr<Layer> clone() const override {
    return std::make_unique<ClassBatchNorm>(*this);
  }
  [[nodiscard]] std::string kind() const override { return "classbn"; }

 private:
  double epsilon_;
  Parameter gamma_;
  Parameter beta_;
  std::optional<detail::NormCache> cache_;
};

/// Inverted dropout on intermediate activations; identity at inference.
class DropoutLayer final : public Layer {
 public:
  DropoutLayer(double rate, std::uint64_t seed) : rate_(rate), rng_(seed) {
    if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout: rate must be in [0, 1)");
  }

  void set_training(bool training) override { training_ = training; }

  Matrix forward(const Matrix& x) override {
    Matrix mask(x.rows(), x.cols(), 1.0);
    if (training_ && rate_ > 0.0) {
      const double keep = 1.0 - rate_;
      for (double& m : mask.values()) m = rng_.uniform() < keep ? 1.0 / keep : 0.0;
    }
    Matrix y = x;
    for (std::size_t i = 0; i < y.size(); ++i) y.values()[i] *= mask.values()[i];
    mask_ = std::move(mask);
    return y;
  }

  Matrix backward(const Matrix& g) override {
    detail::require_forward(mask_.has_value(), kind());
    detail::require_upstream(g, mask_->rows(), mask_->cols(), kind());
    Matrix dx = g;
    for (std::size_t i = 0; i < dx.size(); ++i) dx.values()[i] *= mask_->values()[i];
    return dx;
  }

  [[nodiscard]] std::unique_ptr<Layer> clone() const override {
    return std::make_unique<DropoutLayer>(*this);
  }
  [[nodiscard]] std::string kind() const override { return "dropout"; }

 private:
  double rate_;
  Rng rng_;
  bool training_ = true;
  std::optional<Matrix> mask_;
};

/// Ordered stack of layers with value semantics (copies deep-clone layers).
class LayerStack {
 public:
  LayerStack() = default;
  LayerStack(const LayerStack& other) {
    for (const auto& l : other.layers_) layers_.push_back(l->clone());
  }
  LayerStack& operator=(const LayerStack& other) {
    if (this != &other) {
      LayerStack tmp(other);
      layers_ = std::move(tmp.layers_);
    }
    return *this;
  }
  LayerStack(LayerStack&&) noexcept = default;
  LayerStack& operator=(LayerStack&&) noexcept = default;

  template <typename L>
  L& add(L layer) {
    auto p = std::make_unique<L>(std::move(layer));
    L& ref = *p;
    layers_.push_back(std::move(p));
    return ref;
  }

  Matrix forward(const Matrix& x) {
    Matrix h = x;
    for (auto& l : layers_) h = l->forward(h);
    return h;
  }

  /// Forward pass that also records the output of every layer.
  Matrix forward_trace(const Matrix& x, std::vector<Matrix>& trace) {
    trace.clear();
    Matrix h = x;
    for (auto& l : layers_) {
      h = l->forward(h);
      trace.push_back(h);
    }
    return h;
  }

  Matrix backward(const Matrix& g) {
    Matrix d = g;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) d = (*it)->backward(d);
    return d;
  }

  /// Backward pass with an extra gradient injected at the output of layer
  /// `index` (used for activity regularization of hidden activations).
  Matrix backward_with_injection(const Matrix& g, std::size_t index, const Matrix& extra) {
    Matrix d = g;
    for (std::size_t k = layers_.size(); k-- > 0;) {
      if (k == index) d += extra;
      d = layers_[k]->backward(d);
    }
    return d;
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    for (auto& l : layers_)
      for (auto* p : l->parameters()) out.push_back(p);
    return out;
  }

  void set_training(bool training) {
    for (auto& l : layers_) l->set_training(training);
  }

  [[nodiscard]] std::size_t size() const { return layers_.size(); }
  [[nodiscard]] bool empty() const { return layers_.empty(); }
  Layer& at(std::size_t i) { return *layers_.at(i); }
  [[nodiscard]] const Layer& at(std::size_t i) const { return *layers_.at(i); }

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
};

}  // namespace wtx
