#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "wtx/bench.hpp"
#include "wtx/errors.hpp"
#include "wtx/losses.hpp"
#include "wtx/model.hpp"
#include "wtx/optim.hpp"

namespace wtx {

struct TrainConfig {
  std::size_t iterations = 3000;
  std::size_t batch_size = 64;
  double alpha = 20.0;
  double lr = 3e-3;             // AdamW, transfer network
  double weight_decay = 1e-4;   // AdamW, transfer network
  double other_lr = 1.0;        // SGD momentum, "other" class weights
  double other_momentum = 0.9;
  double other_weight_decay = 1e-4;
  double other_init_std = 0.01;
  std::size_t loss_window = 100;  // trailing iterations averaged into final_cls
  std::uint64_t seed = 1;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(TrainConfig, iterations, batch_size, alpha, lr, weight_decay,
                                   other_lr, other_momentum, other_weight_decay, other_init_std,
                                   loss_window, seed)

struct TrainingReport {
  std::vector<double> l_cls;
  std::vector<double> l_rec;
  std::vector<double> total;
  double final_cls = 0.0;  // mean l_cls over the trailing window
  double train_cls = 0.0;  // l_cls over the full training split after training
  double final_rec = 0.0;
  std::uint64_t source_hash_before = 0;
  std::uint64_t source_hash_after = 0;
  std::uint64_t decoder_hash_init = 0;
  std::uint64_t decoder_hash_final = 0;

  friend bool operator==(const TrainingReport&, const TrainingReport&) = default;
};

inline nlohmann::json to_json(const TrainingReport& r) {
  return {{"l_cls", r.l_cls},
          {"l_rec", r.l_rec},
          {"total", r.total},
          {"final_cls", r.final_cls},
          {"train_cls", r.train_cls},
          {"final_rec", r.final_rec},
          {"source_hash_before", r.source_hash_before},
          {"source_hash_after", r.source_hash_after},
          {"decoder_hash_init", r.decoder_hash_init},
          {"decoder_hash_final", r.decoder_hash_final}};
}

/// Loss curve CSV: iteration,l_cls,l_rec,total
inline std::string loss_curve_csv(const TrainingReport& r) {
  std::string out = "iteration,l_cls,l_rec,total\n";
  for (std::size_t i = 0; i < r.l_cls.size(); ++i) {
    out += std::to_string(i) + ',' + format_double(r.l_cls[i]) + ',' + format_double(r.l_rec[i]) +
           ',' + format_double(r.total[i]) + '\n';
  }
  return out;
}

namespace detail {

inline void check_finite_loss(double v, std::size_t iteration, const char* what) {
  if (!std::isfinite(v)) {
    throw NumericError(std::string(what) + " became non-finite at iteration " +
                       std::to_string(iteration));
  }
}

/// Splits dL/d(class weights) [n_seen x d] into the transferred block (first
/// `n_shared` rows) and the "other" block.
inline void split_weight_gradient(const Matrix& dw, std::size_t n_shared, Matrix& d_shared,
                                  Matrix& d_other) {
  d_shared = Matrix(n_shared, dw.cols());
  d_other = Matrix(dw.rows() - n_shared, dw.cols());
  for (std::size_t i = 0; i < dw.rows(); ++i) {
    auto dst = i < n_shared ? d_shared.row(i) : d_other.row(i - n_shared);
    std::copy_n(dw.row(i).begin(), dw.cols(), dst.begin());
  }
}

}  // namespace detail

/// Classification loss of the head over an entire split (no parameter updates).
inline double split_cls_loss(const TransferModel& model, const DetectionProxyHead& head,
                             const SourceWeights& source, const Split& split) {
  const Matrix w_all = model.transfer(source.weights);
  const Matrix w_shared = select_rows(w_all, source.shared_ids());
  return sigmoid_bce(head.score(split.features, w_shared), split.label_matrix()).value;
}

struct JointLoss {
  double cls = 0.0;
  double rec = 0.0;
  double activity = 0.0;
  double total = 0.0;
};

/// One forward/backward pass of the joint objective on `batch`:
/// l_cls over S and "other", plus alpha * l_rec over all of C when the model
/// has a decoder, plus the activity penalty when configured. Gradients are
/// accumulated into the encoder, into the decoder when alpha > 0, and into
/// head.other. The whole |C| x d_src source matrix goes through the encoder.
inline JointLoss joint_loss_gradients(TransferModel& model, DetectionProxyHead& head,
                                      const SourceWeights& source, const Batch& batch,
                                      double alpha) {
  const auto shared = source.shared_ids();
  const std::size_t n_shared = shared.size();
  std::vector<Matrix> trace;
  const Matrix w_all = model.encoder().forward_trace(source.weights, trace);
  const Matrix w_shared = select_rows(w_all, shared);
  const Matrix logits = head.score(batch.features, w_shared);
  const LossValue cls = sigmoid_bce(logits, batch.labels);

  // dL/dW for the class-weight matrix [W_shared ; other] is dlogits^T X
  Matrix d_shared, d_other;
  detail::split_weight_gradient(matmul_at(cls.gradient, batch.features), n_shared, d_shared,
                                d_other);
  Matrix d_all(w_all.rows(), w_all.cols());
  for (std::size_t k = 0; k < n_shared; ++k)
    std::copy_n(d_shared.row(k).begin(), d_shared.cols(), d_all.row(shared[k]).begin());

  JointLoss out;
  out.cls = cls.value;
  out.total = cls.value;
  if (model.has_decoder()) {
    const Matrix recon = model.decoder().forward(w_all);
    const LossValue rec = smooth_l1(recon, source.weights);
    const TotalLoss tl = total_loss(cls, rec, alpha);
    out.rec = rec.value;
    out.total = tl.value;
    if (alpha > 0.0) d_all += model.decoder().backward(tl.rec_gradient);
  }

  const double act_coef = model.arch().activity_reg;
  if (act_coef > 0.0) {
    // coef * mean(h^2) over the shared rows of the post-ReLU activations
    const std::size_t hidden_idx = model.hidden_index();
    const Matrix& h = trace.at(hidden_idx);
    Matrix extra(h.rows(), h.cols());
    const double denom = static_cast<double>(n_shared * h.cols());
    double act = 0.0;
    for (std::size_t c : shared)
      for (std::size_t j = 0; j < h.cols(); ++j) {
        act += h(c, j) * h(c, j);
        extra(c, j) = 2.0 * act_coef * h(c, j) / denom;
      }
    out.activity = act_coef * act / denom;
    out.total += out.activity;
    model.encoder().backward_with_injection(d_all, hidden_idx, extra);
  } else {
    model.encoder().backward(d_all);
  }
  head.other.grad += d_other;
  return out;
}

/// Joint training of the transfer network and the "other" class weights.
///
/// Each iteration samples a feature batch and takes one step on the joint
/// objective (see joint_loss_gradients). The transfer network is updated by
/// AdamW, the "other" weights by SGD with momentum. The source weights are
/// read only. With alpha == 0 the decoder is never stepped.
inline TrainingReport train_joint(TransferModel& model, DetectionProxyHead& head,
                                  const SourceWeights& source, const Split& train,
                                  const TrainConfig& cfg) {
  if (cfg.batch_size == 0) throw ConfigError("train: batch_size must be positive");
  if (!(cfg.alpha >= 0.0)) throw ConfigError("train: alpha must be non-negative");
  const std::size_t n_shared = source.shared_ids().size();
  if (train.universe.size() != n_shared + head.other.value.rows()) {
    throw StateError("train: split universe does not match shared + other classes");
  }

  TrainingReport rep;
  rep.source_hash_before = matrix_hash(source.weights);
  rep.decoder_hash_init = parameters_hash(model.decoder_parameters());

  const double wd = cfg.weight_decay * model.arch().weight_decay_scale;
  AdamW enc_opt({cfg.lr, 0.9, 0.999, 1e-8, wd});
  AdamW dec_opt({cfg.lr, 0.9, 0.999, 1e-8, wd});
  SgdMomentum other_opt({cfg.other_lr, cfg.other_momentum, cfg.other_weight_decay});

  const bool use_decoder = model.has_decoder();
  const bool step_decoder = use_decoder && cfg.alpha > 0.0;
  auto enc_params = model.encoder_parameters();
  auto dec_params = model.decoder_parameters();
  std::vector<Parameter*> head_params{&head.other};

  Rng rng = Rng(cfg.seed).fork(11);
  model.encoder().set_training(true);
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    zero_grad(enc_params);
    zero_grad(dec_params);
    zero_grad(head_params);
    const Batch batch = sample_batch(train, cfg.batch_size, rng);
    JointLoss loss;
    try {
      loss = joint_loss_gradients(model, head, source, batch, cfg.alpha);
    } catch (const NumericError& e) {
      throw NumericError("iteration " + std::to_string(it) + ": " + e.what());
    }
    detail::check_finite_loss(loss.cls, it, "l_cls");
    detail::check_finite_loss(loss.total, it, "total loss");
    enc_opt.step(enc_params);
    if (step_decoder) dec_opt.step(dec_params);
    other_opt.step(head_params);

    rep.l_cls.push_back(loss.cls);
    rep.l_rec.push_back(loss.rec);
    rep.total.push_back(loss.total);
  }
  model.encoder().set_training(false);

  const std::size_t window = std::min(cfg.loss_window, rep.l_cls.size());
  if (window > 0) {
    rep.final_cls = std::accumulate(rep.l_cls.end() - static_cast<std::ptrdiff_t>(window),
                                    rep.l_cls.end(), 0.0) /
                    static_cast<double>(window);
  }
  rep.train_cls = split_cls_loss(model, head, source, train);
  if (use_decoder) rep.final_rec = model.reconstruction_loss(source.weights);
  rep.source_hash_after = matrix_hash(source.weights);
  rep.decoder_hash_final = parameters_hash(model.decoder_parameters());
  return rep;
}

// ---------------------------------------------------------------------------
// Non-transfer baselines. Both train a linear head on the seen universe with
// SGD momentum and then derive novel-class weights from nearest seen classes.

/// Seen class (by position in `shared_ids`) nearest to each novel class in
/// source-weight space; ties go to the lower position.
inline std::vector<std::vector<std::size_t>> nearest_shared(const SourceWeights& source,
                                                            std::size_t k) {
  const auto shared = source.shared_ids();
  if (k == 0 || k > shared.size()) {
    throw DomainError("nearest_shared: k must be in [1, |S|]");
  }
  std::vector<std::vector<std::size_t>> out(source.num_classes());
  std::vector<std::pair<double, std::size_t>> d(shared.size());
  for (std::size_t c = 0; c < source.num_classes(); ++c) {
    for (std::size_t s = 0; s < shared.size(); ++s)
      d[s] = {detail::sq_dist(source.weights.row(c), source.weights.row(shared[s])), s};
    std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k), d.end());
    for (std::size_t i = 0; i < k; ++i) out[c].push_back(d[i].second);
  }
  return out;
}

struct ConventionalHead {
  Matrix seen;   // rows follow the seen universe: shared ids then other ids
  Matrix delta;  // LSDA only: learned additive offsets for the shared rows
};

/// Trains class weights for the seen universe directly. With `lsda`, shared
/// rows are parameterized as W_C row + learned offset (offsets start at 0).
inline ConventionalHead train_conventional(const SourceWeights& source, const Split& train,
                                           std::size_t num_other, const TrainConfig& cfg,
                                           bool lsda) {
  const auto shared = source.shared_ids();
  const std::size_t n_shared = shared.size();
  const std::size_t d = train.features.cols();
  if (lsda && d != source.dim()) {
    throw ConfigError("lsda: source and feature dimensions must be equal");
  }
  Rng rng = Rng(cfg.seed).fork(13);
  Rng init_rng = Rng(cfg.seed).fork(14);
  Parameter w("conventional.weights",
              gaussian_sample(init_rng, n_shared + num_other, d, 0.0, cfg.other_init_std));
  if (lsda) {
    // offsets for the shared rows start at zero
    for (std::size_t i = 0; i < n_shared; ++i) std::fill_n(w.value.row(i).begin(), d, 0.0);
  }
  const Matrix base = lsda ? concat_rows(select_rows(source.weights, shared), Matrix(num_other, d))
                           : Matrix(n_shared + num_other, d);
  SgdMomentum opt({cfg.other_lr, cfg.other_momentum, cfg.other_weight_decay});
  std::vector<Parameter*> params{&w};
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    const Batch batch = sample_batch(train, cfg.batch_size, rng);
    const LossValue cls = sigmoid_bce(matmul_bt(batch.features, base + w.value), batch.labels);
    detail::check_finite_loss(cls.value, it, "l_cls");
    w.grad = matmul_at(cls.gradient, batch.features);
    opt.step(params);
  }
  ConventionalHead out;
  out.seen = base + w.value;
  if (lsda) {
    out.delta = Matrix(n_shared, d);
    for (std::size_t i = 0; i < n_shared; ++i)
      std::copy_n(w.value.row(i).begin(), d, out.delta.row(i).begin());
  }
  return out;
}

/// "Nearest neighbour" transfer: each source class reuses the learned weight
/// row of its nearest shared class. Shared classes keep their own rows.
/// Returns [|C| x d] in class-id order.
inline Matrix baseline_nn_transfer(const ConventionalHead& head, const SourceWeights& source) {
  const auto shared = source.shared_ids();
  const auto nearest = nearest_shared(source, 1);
  std::vector<std::size_t> pos(source.num_classes(), SIZE_MAX);
  for (std::size_t s = 0; s < shared.size(); ++s) pos[shared[s]] = s;
  Matrix out(source.num_classes(), head.seen.cols());
  for (std::size_t c = 0; c < source.num_classes(); ++c) {
    const std::size_t row = pos[c] != SIZE_MAX ? pos[c] : nearest[c][0];
    std::copy_n(head.seen.row(row).begin(), out.cols(), out.row(c).begin());
  }
  return out;
}

/// LSDA-style additive transfer: a novel class gets its own source row plus
/// the mean learned offset of its k nearest shared classes.
inline Matrix baseline_lsda_bias(const ConventionalHead& head, const SourceWeights& source,
                                 std::size_t k) {
  if (head.delta.empty()) throw StateError("lsda: head was not trained with offsets");
  if (head.delta.cols() != source.dim()) {
    throw ConfigError("lsda: source and feature dimensions must be equal");
  }
  const auto shared = source.shared_ids();
  const auto nearest = nearest_shared(source, k);
  Matrix out = source.weights;
  for (std::size_t c = 0; c < source.num_classes(); ++c) {
    if (source.is_shared(c)) {
      const auto s = static_cast<std::size_t>(
          std::find(shared.begin(), shared.end(), c) - shared.begin());
      for (std::size_t j = 0; j < out.cols(); ++j) out(c, j) += head.delta(s, j);
      continue;
    }
    for (std::size_t j = 0; j < out.cols(); ++j) {
      double mean = 0.0;
      for (std::size_t s : nearest[c]) mean += head.delta(s, j);
      out(c, j) += mean / static_cast<double>(k);
    }
  }
  return out;
}

}  // namespace wtx
