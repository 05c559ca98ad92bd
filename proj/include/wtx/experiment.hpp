#pragma once

#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "wtx/bench.hpp"
#include "wtx/eval.hpp"
#include "wtx/model.hpp"
#include "wtx/train.hpp"

namespace wtx {

inline bool is_baseline_method(const std::string& m) { return m == "frcnn_nn" || m == "lsda"; }

/// Settings for the post-training analyses.
struct AnalysisConfig {
  std::vector<std::size_t> overlap_k = {5, 10, 20, 50};
  std::size_t overlap_classes = 20;
  std::uint64_t eval_seed = 20190;  // separate from training seeds
  std::size_t recall_k = 5;
  std::size_t lsda_k = 3;

  friend bool operator==(const AnalysisConfig&, const AnalysisConfig&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(AnalysisConfig, overlap_k, overlap_classes, eval_seed,
                                   recall_k, lsda_k)

/// Everything produced by training and evaluating one method on one benchmark.
struct RunResult {
  std::string method;
  std::uint64_t seed = 0;
  std::optional<TransferModel> model;       // transfer methods only
  std::optional<TransferModel> model_init;  // parameters before training
  DetectionProxyHead head;
  TrainingReport report;
  Matrix transferred;  // [|C| x d_det], class-id order
  MetricReport seen;
  MetricReport novel;
  OverlapCurve overlap;
  std::optional<NormStats> norms;
};

/// Source-class rows of the detection weights for all of C.
inline Matrix export_rows(const TransferModel& model, const SourceWeights& source) {
  return model.transfer(source.weights);
}

/// Path of the manifest written next to an exported weight file.
inline std::filesystem::path manifest_path(const std::filesystem::path& weights) {
  auto p = weights;
  p += ".manifest.json";
  return p;
}

/// Writes W_D for every source class as a matrix JSON file plus a sidecar
/// manifest (variant, dims, seed, class ids, shared / novel masks, config).
inline void export_transferred(const TransferModel& model, const SourceWeights& source,
                               const std::filesystem::path& path,
                               const nlohmann::json& config_echo) {
  const Matrix w = export_rows(model, source);
  std::vector<std::size_t> ids(source.num_classes());
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  std::vector<int> shared(source.shared_mask.begin(), source.shared_mask.end());
  std::vector<int> novel;
  for (bool s : source.shared_mask) novel.push_back(s ? 0 : 1);
  nlohmann::json wj = matrix_to_json(w);
  wj["config"] = config_echo;
  write_json_file(path, wj);
  write_json_file(manifest_path(path), {{"variant", model.variant()},
                                        {"arch", model.arch()},
                                        {"dims", model.dims()},
                                        {"seed", model.seed()},
                                        {"rows", w.rows()},
                                        {"cols", w.cols()},
                                        {"class_ids", ids},
                                        {"shared_mask", shared},
                                        {"novel_mask", novel},
                                        {"config", config_echo}});
}

/// Loads an exported weight file and checks it against its manifest.
inline Matrix import_transferred(const std::filesystem::path& path) {
  const Matrix w = load_matrix_json(path);
  const auto m = read_json_file(manifest_path(path));
  if (m.at("rows").get<std::size_t>() != w.rows() || m.at("cols").get<std::size_t>() != w.cols()) {
    throw IoError("exported weights " + path.string() + " do not match their manifest");
  }
  return w;
}

/// Trains `method` on `inst` and runs every analysis.
inline RunResult run_method(const BenchmarkInstance& inst, const std::string& method,
                            const ModelDims& dims, const TrainConfig& train_cfg,
                            const AnalysisConfig& analysis) {
  RunResult r;
  r.method = method;
  r.seed = train_cfg.seed;
  const SourceWeights& source = inst.source;
  const std::size_t d_feat = inst.train.features.cols();

  if (is_baseline_method(method)) {
    const bool lsda = method == "lsda";
    const ConventionalHead conv =
        train_conventional(source, inst.train, inst.config.num_other, train_cfg, lsda);
    r.transferred = lsda ? baseline_lsda_bias(conv, source, analysis.lsda_k)
                         : baseline_nn_transfer(conv, source);
    const std::size_t n_shared = source.shared_ids().size();
    r.head.other.value = Matrix(inst.config.num_other, d_feat);
    for (std::size_t i = 0; i < inst.config.num_other; ++i)
      std::copy_n(conv.seen.row(n_shared + i).begin(), d_feat, r.head.other.value.row(i).begin());
    r.head.other.grad = Matrix(inst.config.num_other, d_feat);
  } else {
    const ArchSpec arch = method_arch(method);
    ModelDims d = dims;
    d.d_det = d_feat;
    TransferModel model = build_model(arch, d, train_cfg.seed, source.weights);
    r.model_init = model;
    Rng head_rng = Rng(train_cfg.seed).fork(12);
    r.head = DetectionProxyHead(inst.config.num_other, d_feat, train_cfg.other_init_std, head_rng);
    r.report = train_joint(model, r.head, source, inst.train, train_cfg);
    r.transferred = export_rows(model, source);
    r.norms = norm_stats(model, source);
    r.model = std::move(model);
  }

  r.seen = evaluate(seen_universe_weights(r.transferred, source, r.head.other.value),
                    inst.seen_eval, analysis.recall_k);
  r.novel = evaluate(full_universe_weights(r.transferred, r.head.other.value), inst.novel_eval,
                     analysis.recall_k);
  Rng overlap_rng(analysis.eval_seed);
  r.overlap = nn_overlap(source.weights, r.transferred, analysis.overlap_k,
                         analysis.overlap_classes, overlap_rng);
  return r;
}

}  // namespace wtx
