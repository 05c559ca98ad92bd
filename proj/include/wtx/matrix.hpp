#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "wtx/errors.hpp"

namespace wtx {

/// Dense row-major 2-D array. The single numeric carrier for weights,
/// features, activations and gradients.
template <typename Real>
class BasicMatrix {
 public:
  using value_type = Real;

  BasicMatrix() = default;
  BasicMatrix(std::size_t rows, std::size_t cols, Real fill = Real{0})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  BasicMatrix(std::size_t rows, std::size_t cols, std::vector<Real> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(rows_, cols_));
    }
  }
  BasicMatrix(std::initializer_list<std::initializer_list<Real>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw ShapeError("ragged matrix literal");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  [[nodiscard]] std::size_t rows() const noexcept { return rows_; }
  [[nodiscard]] std::size_t cols() const noexcept { return cols_; }
  [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
  [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

  Real& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  const Real& operator()(std::size_t r, std::size_t c) const noexcept {
    return data_[r * cols_ + c];
  }

  [[nodiscard]] std::span<Real> row(std::size_t r) noexcept {
    return {data_.data() + r * cols_, cols_};
  }
  [[nodiscard]] std::span<const Real> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  [[nodiscard]] std::span<Real> values() noexcept { return data_; }
  [[nodiscard]] std::span<const Real> values() const noexcept { return data_; }

  [[nodiscard]] std::string shape() const { return shape_string(rows_, cols_); }

  void fill(Real v) { std::fill(data_.begin(), data_.end(), v); }

  bool operator==(const BasicMatrix&) const = default;

  static std::string shape_string(std::size_t r, std::size_t c) {
    return "[" + std::to_string(r) + "x" + std::to_string(c) + "]";
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<Real> data_;
};

using Matrix = BasicMatrix<double>;
using MatrixF = BasicMatrix<float>;

template <typename Real>
void require_same_shape(const BasicMatrix<Real>& a, const BasicMatrix<Real>& b,
                        const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + a.shape() + " vs " + b.shape());
  }
}

template <typename Real>
[[nodiscard]] bool all_finite(const BasicMatrix<Real>& m) {
  return std::all_of(m.values().begin(), m.values().end(),
                     [](Real v) { return std::isfinite(v); });
}

template <typename Real>
void require_finite(const BasicMatrix<Real>& m, const char* what) {
  if (!all_finite(m)) throw NumericError(std::string(what) + ": non-finite value");
}

template <typename Real>
[[nodiscard]] BasicMatrix<Real> matmul(const BasicMatrix<Real>& a, const BasicMatrix<Real>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ, " + a.shape() + " x " + b.shape());
  }
  BasicMatrix<Real> out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto orow = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const Real aik = a(i, k);
      if (aik == Real{0}) continue;
      auto brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aik * brow[j];
    }
  }
  require_finite(out, "matmul");
  return out;
}

/// a * b^T without materializing the transpose.
template <typename Real>
[[nodiscard]] BasicMatrix<Real> matmul_bt(const BasicMatrix<Real>& a, const BasicMatrix<Real>& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_bt: inner dimensions differ, " + a.shape() + " x " + b.shape() +
                     "^T");
  }
  BasicMatrix<Real> out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto arow = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      auto brow = b.row(j);
      Real acc{0};
      for (std::size_t k = 0; k < arow.size(); ++k) acc += arow[k] * brow[k];
      out(i, j) = acc;
    }
  }
  require_finite(out, "matmul_bt");
  return out;
}

/// a^T * b without materializing the transpose.
template <typename Real>
[[nodiscard]] BasicMatrix<Real> matmul_at(const BasicMatrix<Real>& a, const BasicMatrix<Real>& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_at: inner dimensions differ, " + a.shape() + "^T x " + b.shape());
  }
  BasicMatrix<Real> out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    auto arow = a.row(k);
    auto brow = b.row(k);
    for (std::size_t i = 0; i < arow.size(); ++i) {
      const Real aki = arow[i];
      if (aki == Real{0}) continue;
      auto orow = out.row(i);
      for (std::size_t j = 0; j < brow.size(); ++j) orow[j] += aki * brow[j];
    }
  }
  require_finite(out, "matmul_at");
  return out;
}

template <typename Real>
[[nodiscard]] BasicMatrix<Real> transpose(const BasicMatrix<Real>& m) {
  BasicMatrix<Real> out(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(j, i) = m(i, j);
  return out;
}

/// Column vector of per-row Euclidean norms.
template <typename Real>
[[nodiscard]] BasicMatrix<Real> row_l2_norms(const BasicMatrix<Real>& m) {
  BasicMatrix<Real> out(m.rows(), 1);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    Real ss{0};
    for (Real v : m.row(i)) ss += v * v;
    out(i, 0) = std::sqrt(ss);
  }
  return out;
}

template <typename Real>
[[nodiscard]] BasicMatrix<Real> select_rows(const BasicMatrix<Real>& m,
                                            std::span<const std::size_t> idx) {
  BasicMatrix<Real> out(idx.size(), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= m.rows()) throw ShapeError("select_rows: row index out of range");
    std::copy_n(m.row(idx[i]).begin(), m.cols(), out.row(i).begin());
  }
  return out;
}

/// Stacks `top` above `bottom`.
template <typename Real>
[[nodiscard]] BasicMatrix<Real> concat_rows(const BasicMatrix<Real>& top,
                                            const BasicMatrix<Real>& bottom) {
  if (top.empty()) return bottom;
  if (bottom.empty()) return top;
  if (top.cols() != bottom.cols()) {
    throw ShapeError("concat_rows: column mismatch " + top.shape() + " vs " + bottom.shape());
  }
  std::vector<Real> data(top.values().begin(), top.values().end());
  data.insert(data.end(), bottom.values().begin(), bottom.values().end());
  return BasicMatrix<Real>(top.rows() + bottom.rows(), top.cols(), std::move(data));
}

template <typename Real>
BasicMatrix<Real>& operator+=(BasicMatrix<Real>& a, const BasicMatrix<Real>& b) {
  require_same_shape(a, b, "add");
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) av[i] += bv[i];
  return a;
}

template <typename Real>
[[nodiscard]] BasicMatrix<Real> operator+(BasicMatrix<Real> a, const BasicMatrix<Real>& b) {
  a += b;
  return a;
}

template <typename Real>
[[nodiscard]] BasicMatrix<Real> operator-(BasicMatrix<Real> a, const BasicMatrix<Real>& b) {
  require_same_shape(a, b, "sub");
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) av[i] -= bv[i];
  return a;
}

template <typename Real>
[[nodiscard]] BasicMatrix<Real> operator*(BasicMatrix<Real> a, Real s) {
  for (Real& v : a.values()) v *= s;
  return a;
}

template <typename Real>
[[nodiscard]] Real max_abs_diff(const BasicMatrix<Real>& a, const BasicMatrix<Real>& b) {
  require_same_shape(a, b, "max_abs_diff");
  Real m{0};
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
  return m;
}

/// Seedable 64-bit generator. The engine is mt19937_64, whose output sequence
/// is fixed by the standard; all derived distributions are implemented here so
/// the sample stream does not depend on the standard library vendor.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  [[nodiscard]] std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n), rejection sampled to avoid modulo bias.
  std::size_t uniform_index(std::size_t n) {
    if (n == 0) throw DomainError("uniform_index: empty range");
    const std::uint64_t bound = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return static_cast<std::size_t>(x % bound);
  }

  /// Standard normal via the Box-Muller transform (pairs are cached).
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  /// Derives an independent child stream; used to give each subsystem its own
  /// sequence so adding draws in one place does not shift another.
  [[nodiscard]] Rng fork(std::uint64_t stream) const {
    std::uint64_t z = seed_ + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return Rng(z ^ (z >> 31));
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[uniform_index(i)]);
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

template <typename Real = double>
[[nodiscard]] BasicMatrix<Real> gaussian_sample(Rng& rng, std::size_t rows, std::size_t cols,
                                                double mean, double stddev) {
  if (!(stddev >= 0.0)) throw DomainError("gaussian_sample: negative standard deviation");
  BasicMatrix<Real> out(rows, cols);
  for (Real& v : out.values()) v = static_cast<Real>(mean + stddev * rng.normal());
  return out;
}

}  // namespace wtx
