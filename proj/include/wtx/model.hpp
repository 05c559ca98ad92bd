#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "wtx/errors.hpp"
#include "wtx/layers.hpp"
#include "wtx/losses.hpp"
#include "wtx/matrix.hpp"
#include "wtx/matrix_io.hpp"

namespace wtx {

enum class Variant { wtn, wtn_plus, ae_wtn };
enum class FeatureNorm { none, group, class_batch };

NLOHMANN_JSON_SERIALIZE_ENUM(Variant, {{Variant::wtn, "wtn"},
                                       {Variant::wtn_plus, "wtn_plus"},
                                       {Variant::ae_wtn, "ae_wtn"}})
NLOHMANN_JSON_SERIALIZE_ENUM(FeatureNorm, {{FeatureNorm::none, "none"},
                                           {FeatureNorm::group, "group"},
                                           {FeatureNorm::class_batch, "class_batch"}})

inline std::string to_string(Variant v) { return nlohmann::json(v).get<std::string>(); }

/// Full architecture of a transfer network. The three named variants fix
/// `input_norm`, `feature_norm` and `decoder`; the normalization ablation and
/// the regularized WTN+ rows flip individual switches.
struct ArchSpec {
  Variant variant = Variant::wtn_plus;
  bool input_norm = true;
  FeatureNorm feature_norm = FeatureNorm::group;
  bool decoder = false;
  double dropout = 0.0;
  double activity_reg = 0.0;
  double hidden_scale = 1.0;
  double weight_decay_scale = 1.0;

  friend bool operator==(const ArchSpec&, const ArchSpec&) = default;

  static ArchSpec of(Variant v) {
    switch (v) {
      case Variant::wtn: return {Variant::wtn, false, FeatureNorm::none, false};
      case Variant::wtn_plus: return {Variant::wtn_plus, true, FeatureNorm::group, false};
      case Variant::ae_wtn: return {Variant::ae_wtn, true, FeatureNorm::group, true};
    }
    throw ConfigError("unknown variant");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ArchSpec, variant, input_norm, feature_norm, decoder, dropout,
                                   activity_reg, hidden_scale, weight_decay_scale)

/// Named transfer-network methods used by the comparison tables.
inline ArchSpec method_arch(const std::string& name) {
  if (name == "wtn") return ArchSpec::of(Variant::wtn);
  if (name == "wtn_plus") return ArchSpec::of(Variant::wtn_plus);
  if (name == "ae_wtn") return ArchSpec::of(Variant::ae_wtn);
  ArchSpec a = ArchSpec::of(Variant::wtn_plus);
  if (name == "wtn_input_norm") a.feature_norm = FeatureNorm::none;
  else if (name == "wtn_group_norm") a.input_norm = false;
  else if (name == "wtn_plus_classbn") a.feature_norm = FeatureNorm::class_batch;
  else if (name == "wtn_plus_wd5") a.weight_decay_scale = 5.0;
  else if (name == "wtn_plus_activity") a.activity_reg = 0.01;
  else if (name == "wtn_plus_dropout") a.dropout = 0.3;
  else if (name == "wtn_plus_reduced") a.hidden_scale = 0.5;
  else throw ConfigError("unknown transfer method '" + name + "'");
  return a;
}

struct ModelDims {
  std::size_t d_src = 64;
  std::size_t hidden = 64;
  std::size_t d_det = 64;
  std::size_t groups = 8;

  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ModelDims, d_src, hidden, d_det, groups)

/// A weight transfer network T (encoder) with an optional mirrored decoder G.
///
/// Encoder: [standardize] -> linear -> [norm] -> relu -> [dropout] -> linear
/// Decoder: linear -> [norm] -> relu -> linear -> [de-standardize]
///
/// The standardizer is fitted once on all source classes and frozen.
class TransferModel {
 public:
  TransferModel(ArchSpec arch, ModelDims dims, std::uint64_t seed,
                std::optional<InputStandardizer> standardizer)
      : arch_(arch), dims_(dims), seed_(seed), standardizer_(std::move(standardizer)) {
    validate();
    Rng rng(seed);
    const std::size_t h = hidden_width();
    if (arch_.input_norm) encoder_.add(*standardizer_);
    encoder_.add(LinearLayer(dims_.d_src, h, rng, "encoder.fc1"));
    add_norm(encoder_, h, "encoder.norm");
    hidden_index_ = encoder_.size();
    encoder_.add(ReluLayer{});
    if (arch_.dropout > 0.0) encoder_.add(DropoutLayer(arch_.dropout, rng.fork(7).seed()));
    encoder_.add(LinearLayer(h, dims_.d_det, rng, "encoder.fc2"));
    if (arch_.decoder) {
      decoder_.add(LinearLayer(dims_.d_det, h, rng, "decoder.fc1"));
      add_norm(decoder_, h, "decoder.norm");
      decoder_.add(ReluLayer{});
      decoder_.add(LinearLayer(h, dims_.d_src, rng, "decoder.fc2"));
      if (arch_.input_norm) decoder_.add(InverseStandardizer(*standardizer_));
    }
  }

  [[nodiscard]] const ArchSpec& arch() const { return arch_; }
  [[nodiscard]] Variant variant() const { return arch_.variant; }
  [[nodiscard]] const ModelDims& dims() const { return dims_; }
  [[nodiscard]] std::uint64_t seed() const { return seed_; }
  [[nodiscard]] std::size_t hidden_width() const {
    return static_cast<std::size_t>(static_cast<double>(dims_.hidden) * arch_.hidden_scale);
  }
  [[nodiscard]] bool has_decoder() const { return arch_.decoder; }
  [[nodiscard]] bool has_standardizer() const { return arch_.input_norm; }
  [[nodiscard]] const std::optional<InputStandardizer>& standardizer() const {
    return standardizer_;
  }
  /// Index of the encoder's ReLU; its output is the post-ReLU measurement point.
  [[nodiscard]] std::size_t hidden_index() const { return hidden_index_; }

  LayerStack& encoder() { return encoder_; }
  LayerStack& decoder() { return decoder_; }
  [[nodiscard]] const LayerStack& encoder() const { return encoder_; }
  [[nodiscard]] const LayerStack& decoder() const { return decoder_; }

  std::vector<Parameter*> encoder_parameters() { return encoder_.parameters(); }
  std::vector<Parameter*> decoder_parameters() { return decoder_.parameters(); }
  std::vector<Parameter*> parameters() {
    auto p = encoder_.parameters();
    for (auto* q : decoder_.parameters()) p.push_back(q);
    return p;
  }

  /// T(W): maps source class weights [k x d_src] to detection weights [k x d_det].
  [[nodiscard]] Matrix transfer(const Matrix& w) const {
    check_input(w, dims_.d_src, "transfer");
    LayerStack enc = encoder_;
    enc.set_training(false);
    return enc.forward(w);
  }

  /// G(T(W)); only defined for models with a decoder.
  [[nodiscard]] Matrix reconstruct(const Matrix& w) const {
    if (!has_decoder()) throw StateError("reconstruct: model has no decoder");
    LayerStack dec = decoder_;
    return dec.forward(transfer(w));
  }

  /// Mean smooth-L1 between G(T(W)) and W.
  [[nodiscard]] double reconstruction_loss(const Matrix& w) const {
    return smooth_l1(reconstruct(w), w).value;
  }

  /// Post-ReLU hidden activations of the encoder for each input row.
  [[nodiscard]] Matrix hidden_activations(const Matrix& w) const {
    check_input(w, dims_.d_src, "hidden_activations");
    LayerStack enc = encoder_;
    enc.set_training(false);
    std::vector<Matrix> trace;
    enc.forward_trace(w, trace);
    return trace.at(hidden_index_);
  }

  [[nodiscard]] nlohmann::json to_json() const {
    nlohmann::json params = nlohmann::json::object();
    TransferModel copy = *this;
    for (auto* p : copy.parameters()) params[p->name] = matrix_to_json(p->value);
    nlohmann::json j{{"arch", arch_}, {"dims", dims_}, {"seed", seed_}, {"parameters", params}};
    if (standardizer_) {
      j["standardizer"] = {{"mu", standardizer_->mu()},
                           {"sigma", standardizer_->sigma()},
                           {"epsilon", standardizer_->epsilon()}};
    }
    return j;
  }

  static TransferModel from_json(const nlohmann::json& j) {
    std::optional<InputStandardizer> s;
    if (j.contains("standardizer")) {
      const auto& sj = j.at("standardizer");
      s.emplace(sj.at("mu").get<std::vector<double>>(), sj.at("sigma").get<std::vector<double>>(),
                sj.at("epsilon").get<double>());
    }
    TransferModel m(j.at("arch").get<ArchSpec>(), j.at("dims").get<ModelDims>(),
                    j.at("seed").get<std::uint64_t>(), std::move(s));
    const auto& params = j.at("parameters");
    for (auto* p : m.parameters()) {
      Matrix v = matrix_from_json(params.at(p->name));
      require_same_shape(v, p->value, p->name.c_str());
      p->value = std::move(v);
    }
    return m;
  }

 private:
  void validate() const {
    if (dims_.d_src == 0 || dims_.d_det == 0 || hidden_width() == 0) {
      throw ConfigError("model: dimensions must be positive");
    }
    if (arch_.feature_norm == FeatureNorm::group &&
        (dims_.groups == 0 || hidden_width() % dims_.groups != 0)) {
      throw ConfigError("model: hidden width " + std::to_string(hidden_width()) +
                        " not divisible into " + std::to_string(dims_.groups) + " groups");
    }
    if (arch_.input_norm && !standardizer_) throw ConfigError("model: standardizer required");
    if (arch_.input_norm && standardizer_->dim() != dims_.d_src) {
      throw ConfigError("model: standardizer dimension does not match d_src");
    }
    if (arch_.activity_reg < 0.0) throw ConfigError("model: activity_reg must be non-negative");
  }

  void add_norm(LayerStack& stack, std::size_t width, const std::string& name) const {
    if (arch_.feature_norm == FeatureNorm::group)
      stack.add(GroupNormLayer(width, dims_.groups, 1e-5, name));
    else if (arch_.feature_norm == FeatureNorm::class_batch)
      stack.add(ClassBatchNorm(width, 1e-5, name));
  }

  static void check_input(const Matrix& w, std::size_t cols, const char* what) {
    if (w.cols() != cols) {
      throw ShapeError(std::string(what) + ": input " + w.shape() + " expects " +
                       std::to_string(cols) + " columns");
    }
  }

  ArchSpec arch_;
  ModelDims dims_;
  std::uint64_t seed_;
  std::optional<InputStandardizer> standardizer_;
  LayerStack encoder_;
  LayerStack decoder_;
  std::size_t hidden_index_ = 0;
};

inline constexpr double kStandardizerEpsilon = 1e-5;

/// Builds a freshly initialized model; the standardizer (when the
/// architecture has one) is fitted on every row of `source_weights`.
inline TransferModel build_model(const ArchSpec& arch, ModelDims dims, std::uint64_t seed,
                                 const Matrix& source_weights) {
  dims.d_src = source_weights.cols();
  std::optional<InputStandardizer> s;
  if (arch.input_norm) s = InputStandardizer::fit(source_weights, kStandardizerEpsilon);
  return TransferModel(arch, dims, seed, std::move(s));
}

/// Scores features against transferred weights followed by the
/// conventionally learned "other" class weights. No per-class bias.
/// Logit column k corresponds to row k of [W_transferred ; other].
struct DetectionProxyHead {
  Parameter other;

  DetectionProxyHead() : other("head.other", Matrix()) {}
  DetectionProxyHead(std::size_t num_other, std::size_t d_feat, double init_std, Rng& rng)
      : other("head.other", gaussian_sample(rng, num_other, d_feat, 0.0, init_std)) {}

  [[nodiscard]] Matrix class_weights(const Matrix& transferred) const {
    return concat_rows(transferred, other.value);
  }

  [[nodiscard]] Matrix score(const Matrix& features, const Matrix& transferred) const {
    const Matrix w = class_weights(transferred);
    if (features.cols() != w.cols()) {
      throw ShapeError("score: features " + features.shape() + " vs class weights " + w.shape());
    }
    return matmul_bt(features, w);
  }
};

/// FNV-1a over the raw bytes of a matrix; used to prove weights are untouched.
inline std::uint64_t matrix_hash(const Matrix& m) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  const std::size_t r = m.rows(), c = m.cols();
  mix(&r, sizeof r);
  mix(&c, sizeof c);
  mix(m.values().data(), m.size() * sizeof(double));
  return h;
}

inline std::uint64_t parameters_hash(const std::vector<Parameter*>& params) {
  std::uint64_t h = 0;
  for (auto* p : params) h = h * 31 + matrix_hash(p->value);
  return h;
}

}  // namespace wtx
