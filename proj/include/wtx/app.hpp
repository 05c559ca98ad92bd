#pragma once

#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "wtx/experiment.hpp"
#include "wtx/gradcheck.hpp"

// Command implementations behind the `wtx` binary. Each command reads a
// validated ExperimentConfig or a finished run directory and writes its
// artifacts atomically: run directories are assembled under a temporary name
// and renamed into place on success.

namespace wtx::app {

namespace fs = std::filesystem;
using nlohmann::json;

/// Transfer-network width settings; input and output widths come from the benchmark.
struct ModelConfig {
  std::size_t hidden = 64;
  std::size_t groups = 8;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ModelConfig, hidden, groups)

/// Everything one invocation needs. A run with seed s uses s for both the
/// benchmark instance and the transfer-network initialization, so the
/// `seed` fields of the benchmark and train sections are not part of the
/// file schema.
struct ExperimentConfig {
  BenchmarkConfig benchmark;
  std::string variant = "ae_wtn";  // method trained by `wtx train`
  ModelConfig model;
  TrainConfig train;
  AnalysisConfig analysis;
  std::vector<std::string> methods = {"wtn", "wtn_plus", "ae_wtn"};  // `wtx compare`
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  std::string output_dir = "runs";

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

inline json to_json(const ExperimentConfig& c) {
  json b = c.benchmark;
  json t = c.train;
  b.erase("seed");
  t.erase("seed");
  return {{"benchmark", b},   {"variant", c.variant}, {"model", c.model},
          {"train", t},       {"analysis", c.analysis}, {"methods", c.methods},
          {"seeds", c.seeds}, {"output_dir", c.output_dir}};
}

namespace detail {

inline bool same_kind(const json& def, const json& given) {
  if (def.is_boolean()) return given.is_boolean();
  if (def.is_number_unsigned()) return given.is_number_unsigned();
  if (def.is_number()) return given.is_number();
  if (def.is_string()) return given.is_string();
  if (def.is_array()) return given.is_array();
  if (def.is_object()) return given.is_object();
  return true;
}

// Rejects keys absent from the defaults and values of the wrong JSON kind.
inline void check_schema(const json& given, const json& defaults, const std::string& prefix) {
  for (const auto& [key, value] : given.items()) {
    const std::string name = prefix + key;
    if (!defaults.contains(key)) throw ConfigError("unknown config key '" + name + "'");
    const json& def = defaults.at(key);
    if (!same_kind(def, value)) throw ConfigError("config key '" + name + "' has the wrong type");
    if (def.is_object()) check_schema(value, def, name + ".");
  }
}

}  // namespace detail

/// Every check that can be made before any work starts.
inline void validate(const ExperimentConfig& c) {
  BenchmarkConfig b = c.benchmark;
  wtx::detail::validate(b);
  auto check_method = [&](const std::string& m) {
    if (!is_baseline_method(m)) (void)method_arch(m);
  };
  check_method(c.variant);
  if (c.methods.empty()) throw ConfigError("methods must not be empty");
  for (const auto& m : c.methods) check_method(m);
  if (c.seeds.empty()) throw ConfigError("seeds must not be empty");
  if (c.model.hidden == 0 || c.model.groups == 0) throw ConfigError("model widths must be positive");
  if (c.model.hidden % c.model.groups != 0) throw ConfigError("model.hidden must be divisible by model.groups");
  const TrainConfig& t = c.train;
  if (t.iterations == 0 || t.batch_size == 0) throw ConfigError("train.iterations and train.batch_size must be positive");
  if (!(t.alpha >= 0.0)) throw ConfigError("train.alpha must be non-negative");
  if (!(t.lr > 0.0) || !(t.other_lr > 0.0)) throw ConfigError("learning rates must be positive");
  if (!(t.weight_decay >= 0.0) || !(t.other_weight_decay >= 0.0)) throw ConfigError("weight decay must be non-negative");
  if (!(t.other_momentum >= 0.0 && t.other_momentum < 1.0)) throw ConfigError("train.other_momentum must be in [0, 1)");
  const AnalysisConfig& a = c.analysis;
  if (a.overlap_classes == 0 || a.overlap_classes > b.num_classes) throw ConfigError("analysis.overlap_classes out of range");
  for (auto k : a.overlap_k)
    if (k == 0 || k >= b.num_classes) throw ConfigError("analysis.overlap_k values must be in [1, num_classes)");
  if (a.recall_k == 0) throw ConfigError("analysis.recall_k must be positive");
  if (a.lsda_k == 0 || a.lsda_k > b.num_shared) throw ConfigError("analysis.lsda_k must be in [1, num_shared]");
}

/// Strict parse: missing keys keep their defaults, unknown keys and wrong
/// types are ConfigErrors.
inline ExperimentConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  const json defaults = to_json(ExperimentConfig{});
  detail::check_schema(j, defaults, "");
  json merged = defaults;
  merged.merge_patch(j);
  ExperimentConfig c;
  try {
    json b = merged.at("benchmark");
    json t = merged.at("train");
    b["seed"] = 1;
    t["seed"] = 1;
    c.benchmark = b.get<BenchmarkConfig>();
    c.train = t.get<TrainConfig>();
    c.variant = merged.at("variant").get<std::string>();
    c.model = merged.at("model").get<ModelConfig>();
    c.analysis = merged.at("analysis").get<AnalysisConfig>();
    c.methods = merged.at("methods").get<std::vector<std::string>>();
    c.seeds = merged.at("seeds").get<std::vector<std::uint64_t>>();
    c.output_dir = merged.at("output_dir").get<std::string>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  validate(c);
  return c;
}

inline ExperimentConfig load_config(const fs::path& path) {
  json j;
  try {
    j = read_json_file(path);
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
  return config_from_json(j);
}

/// Command-line overrides, applied flag > WTX_SEED > file.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> variant;
  std::optional<double> alpha;
};

inline std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("WTX_SEED");
  if (!s || !*s) return std::nullopt;
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(s, &used);
    if (used != std::string(s).size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(std::string("WTX_SEED is not an unsigned integer: ") + s);
  }
}

inline ExperimentConfig apply_overrides(ExperimentConfig c, const Overrides& o) {
  if (auto e = env_seed()) c.seeds = {*e};
  if (o.seed) c.seeds = {*o.seed};
  if (o.variant) c.variant = *o.variant;
  if (o.alpha) c.train.alpha = *o.alpha;
  validate(c);
  return c;
}

/// Fully resolved settings of one (method, seed) run; embedded in every artifact.
inline json run_echo(const ExperimentConfig& c, const std::string& method, std::uint64_t seed) {
  BenchmarkConfig b = c.benchmark;
  TrainConfig t = c.train;
  b.seed = seed;
  t.seed = seed;
  return {{"method", method}, {"seed", seed},       {"benchmark", b},
          {"model", c.model}, {"train", t},         {"analysis", c.analysis}};
}

inline std::string run_stem(const std::string& method, std::uint64_t seed) {
  return method + "_seed" + std::to_string(seed);
}

// ---------------------------------------------------------------------------
// Atomic directories.

/// Creates `target` by filling a sibling temporary directory and renaming it
/// on success. An existing target is an error unless `overwrite` is set.
inline void write_directory(const fs::path& target, bool overwrite,
                            const std::function<void(const fs::path&)>& fill) {
  if (fs::exists(target) && !overwrite) {
    throw IoError(target.string() + " already exists (pass --overwrite to replace it)");
  }
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  fs::path tmp = target;
  tmp += ".partial";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  try {
    fill(tmp);
  } catch (...) {
    fs::remove_all(tmp);
    throw;
  }
  fs::remove_all(target);
  fs::rename(tmp, target);
}

// ---------------------------------------------------------------------------
// Run directories.

struct RunFiles {
  fs::path dir;
  std::string stem;

  [[nodiscard]] fs::path run() const { return dir / "run.json"; }
  [[nodiscard]] fs::path report() const { return dir / (stem + ".report.json"); }
  [[nodiscard]] fs::path loss_curve() const { return dir / (stem + ".loss.csv"); }
  [[nodiscard]] fs::path weights() const { return dir / (stem + ".weights.json"); }
  [[nodiscard]] fs::path other() const { return dir / (stem + ".other.json"); }
  [[nodiscard]] fs::path model() const { return dir / (stem + ".model.json"); }
  [[nodiscard]] fs::path hidden() const { return dir / (stem + ".hidden.json"); }
  [[nodiscard]] fs::path metrics() const { return dir / (stem + ".metrics.json"); }
  [[nodiscard]] fs::path overlap() const { return dir / (stem + ".overlap.json"); }
  [[nodiscard]] fs::path overlap_csv() const { return dir / (stem + ".overlap.csv"); }
  [[nodiscard]] fs::path norms() const { return dir / (stem + ".norms.json"); }
};

inline RunFiles open_run(const fs::path& dir) {
  const auto run = read_json_file(dir / "run.json");
  return {dir, run_stem(run.at("method").get<std::string>(), run.at("seed").get<std::uint64_t>())};
}

inline json read_echo(const fs::path& dir) { return read_json_file(dir / "run.json").at("config"); }

inline BenchmarkInstance benchmark_for(const json& echo) {
  return generate_benchmark(echo.at("benchmark").get<BenchmarkConfig>());
}

/// Exports W_D for all of C with its sidecar manifest. Baselines have no
/// transfer network, so their manifest carries only the method name.
inline void export_run_weights(const RunResult& r, const SourceWeights& source,
                               const fs::path& path, const json& echo) {
  if (r.model) {
    export_transferred(*r.model, source, path, echo);
    return;
  }
  std::vector<std::size_t> ids(source.num_classes());
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  std::vector<int> shared(source.shared_mask.begin(), source.shared_mask.end());
  std::vector<int> novel;
  for (bool s : source.shared_mask) novel.push_back(s ? 0 : 1);
  json wj = matrix_to_json(r.transferred);
  wj["config"] = echo;
  write_json_file(path, wj);
  write_json_file(manifest_path(path), {{"variant", r.method},
                                        {"arch", nullptr},
                                        {"seed", r.seed},
                                        {"rows", r.transferred.rows()},
                                        {"cols", r.transferred.cols()},
                                        {"class_ids", ids},
                                        {"shared_mask", shared},
                                        {"novel_mask", novel},
                                        {"config", echo}});
}

/// Trains one method on one seed and writes the run directory:
/// run.json, report, loss curve, exported weights with manifest, "other"
/// class weights, and (transfer methods) model parameters and hidden activations.
inline RunResult train_run(const ExperimentConfig& c, const std::string& method,
                           std::uint64_t seed, const BenchmarkInstance& inst,
                           const fs::path& dir, bool overwrite) {
  const json echo = run_echo(c, method, seed);
  TrainConfig tc = c.train;
  tc.seed = seed;
  const ModelDims dims{inst.config.dim, c.model.hidden, inst.config.dim, c.model.groups};
  RunResult r = run_method(inst, method, dims, tc, c.analysis);
  write_directory(dir, overwrite, [&](const fs::path& tmp) {
    const RunFiles f{tmp, run_stem(method, seed)};
    write_json_file(f.run(), {{"method", method}, {"seed", seed}, {"config", echo}});
    json rep = to_json(r.report);
    rep["config"] = echo;
    write_json_file(f.report(), rep);
    write_text_file(f.loss_curve(), loss_curve_csv(r.report));
    export_run_weights(r, inst.source, f.weights(), echo);
    json other = matrix_to_json(r.head.other.value);
    other["config"] = echo;
    write_json_file(f.other(), other);
    if (r.model) {
      json m = r.model->to_json();
      m["config"] = echo;
      write_json_file(f.model(), m);
      json h = matrix_to_json(r.model->hidden_activations(inst.source.weights));
      h["config"] = echo;
      write_json_file(f.hidden(), h);
    }
  });
  return r;
}

/// Scores the exported weights of a finished run on the seen and novel
/// evaluation splits.
inline json eval_run(const fs::path& dir) {
  const RunFiles f = open_run(dir);
  const json echo = read_echo(dir);
  const BenchmarkInstance inst = benchmark_for(echo);
  const auto analysis = echo.at("analysis").get<AnalysisConfig>();
  const Matrix w = import_transferred(f.weights());
  const Matrix other = matrix_from_json(read_json_file(f.other()));
  const MetricReport seen =
      evaluate(seen_universe_weights(w, inst.source, other), inst.seen_eval, analysis.recall_k);
  const MetricReport novel =
      evaluate(full_universe_weights(w, other), inst.novel_eval, analysis.recall_k);
  json out{{"method", echo.at("method")},
           {"seed", echo.at("seed")},
           {"seen", to_json(seen)},
           {"novel", to_json(novel)},
           {"config", echo}};
  write_json_file(f.metrics(), out);
  return out;
}

/// Neighbour overlap between W_C and the exported W_D, plus post-ReLU norm
/// statistics when the run kept hidden activations.
inline json analyze_run(const fs::path& dir) {
  const RunFiles f = open_run(dir);
  const json echo = read_echo(dir);
  const BenchmarkInstance inst = benchmark_for(echo);
  const auto analysis = echo.at("analysis").get<AnalysisConfig>();
  const Matrix w = import_transferred(f.weights());
  Rng rng(analysis.eval_seed);
  const OverlapCurve curve = nn_overlap(inst.source.weights, w, analysis.overlap_k,
                                        analysis.overlap_classes, rng);
  json ov = to_json(curve);
  ov["config"] = echo;
  write_json_file(f.overlap(), ov);
  std::string csv = "k,mean_overlap\n";
  for (std::size_t i = 0; i < curve.k_values.size(); ++i)
    csv += std::to_string(curve.k_values[i]) + ',' + format_double(curve.mean_overlap[i]) + '\n';
  write_text_file(f.overlap_csv(), csv);
  json out{{"overlap", ov}};
  if (fs::exists(f.hidden())) {
    const NormStats s =
        activation_norm_stats(matrix_from_json(read_json_file(f.hidden())), inst.source);
    json n = to_json(s);
    n["config"] = echo;
    write_json_file(f.norms(), n);
    out["norms"] = n;
  }
  return out;
}

inline TableRow table_row(const fs::path& dir) {
  const RunFiles f = open_run(dir);
  if (!fs::exists(f.metrics())) throw StateError(dir.string() + ": run `wtx eval` first");
  const json m = read_json_file(f.metrics());
  const json echo = m.at("config");
  TableRow r;
  r.method = echo.at("method").get<std::string>();
  r.seed = echo.at("seed").get<std::uint64_t>();
  r.seen_top1 = m.at("seen").at("top1").get<double>();
  r.novel_top1 = m.at("novel").at("top1").get<double>();
  r.novel_recall5 = m.at("novel").at("recall_at_k").get<double>();
  // rows must agree on everything except the seed
  json b = echo.at("benchmark");
  b.erase("seed");
  r.benchmark = b;
  if (!is_baseline_method(r.method)) {
    const ArchSpec a = method_arch(r.method);
    r.input_norm = a.input_norm;
    r.group_norm = a.feature_norm == FeatureNorm::group;
  }
  return r;
}

/// Builds the comparison table from finished runs; writes table.csv and table.json.
inline ComparisonTable compare_runs(const std::vector<fs::path>& dirs, const fs::path& out,
                                    bool grid) {
  std::vector<TableRow> rows;
  for (const auto& d : dirs) rows.push_back(table_row(d));
  const ComparisonTable t = comparison_table(rows, true, grid);
  fs::create_directories(out);
  write_text_file(out / "table.csv", to_csv(t));
  write_json_file(out / "table.json", to_json(t));
  return t;
}

/// Full pipeline: generate, train, eval and analyze every (method, seed),
/// then tabulate. Runs fan out over `jobs` worker threads.
inline ComparisonTable compare_pipeline(const ExperimentConfig& c, const fs::path& out,
                                        bool overwrite, std::size_t jobs, bool grid,
                                        std::ostream& log) {
  if (fs::exists(out) && !overwrite) {
    throw IoError(out.string() + " already exists (pass --overwrite to replace it)");
  }
  std::vector<BenchmarkInstance> instances;
  for (auto s : c.seeds) {
    BenchmarkConfig b = c.benchmark;
    b.seed = s;
    instances.push_back(generate_benchmark(b));
  }
  struct Job {
    std::string method;
    std::size_t seed_index;
    fs::path dir;
  };
  std::vector<Job> work;
  for (std::size_t i = 0; i < c.seeds.size(); ++i)
    for (const auto& m : c.methods) work.push_back({m, i, out / "runs" / run_stem(m, c.seeds[i])});

  fs::path tmp = out;
  tmp += ".partial";
  fs::remove_all(tmp);
  fs::create_directories(tmp / "runs");
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::exception_ptr failure;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next++;
      if (i >= work.size()) return;
      {
        std::lock_guard lock(mu);
        if (failure) return;
      }
      const Job& j = work[i];
      try {
        const fs::path dir = tmp / "runs" / j.dir.filename();
        train_run(c, j.method, c.seeds[j.seed_index], instances[j.seed_index], dir, true);
        eval_run(dir);
        analyze_run(dir);
        std::lock_guard lock(mu);
        log << "finished " << j.dir.filename().string() << '\n';
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> threads;
  for (std::size_t t = 1; t < std::max<std::size_t>(jobs, 1); ++t) threads.emplace_back(worker);
  worker();
  for (auto& t : threads) t.join();
  if (failure) {
    fs::remove_all(tmp);
    std::rethrow_exception(failure);
  }
  std::vector<fs::path> dirs;
  for (const auto& j : work) dirs.push_back(tmp / "runs" / j.dir.filename());
  ComparisonTable t;
  try {
    t = compare_runs(dirs, tmp, grid);
    write_json_file(tmp / "config.json", to_json(c));
  } catch (...) {
    fs::remove_all(tmp);
    throw;
  }
  fs::remove_all(out);
  fs::rename(tmp, out);
  return t;
}

/// Writes one benchmark directory for `seed`.
inline void generate(const ExperimentConfig& c, std::uint64_t seed, const fs::path& out,
                     bool overwrite) {
  BenchmarkConfig b = c.benchmark;
  b.seed = seed;
  const BenchmarkInstance inst = generate_benchmark(b);
  write_directory(out, overwrite, [&](const fs::path& tmp) { save_benchmark(inst, tmp); });
}

/// Finite-difference suite; returns the JSON report.
inline json gradcheck(std::size_t seeds, bool& all_passed) {
  const auto results = run_gradcheck_suite(seeds);
  json rows = json::array();
  all_passed = true;
  double worst = 0.0;
  for (const auto& r : results) {
    rows.push_back(to_json(r));
    all_passed = all_passed && r.passed(kGradTolerance);
    worst = std::max(worst, r.max_rel_error);
  }
  return {{"step", kGradStep},       {"tolerance", kGradTolerance}, {"seeds", seeds},
          {"checks", results.size()}, {"max_rel_error", worst},     {"passed", all_passed},
          {"results", rows}};
}

}  // namespace wtx::app
