#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <gtest/gtest.h>

#include "wtx/app.hpp"

using namespace wtx;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json tiny_json() {
  return json::parse(R"({
    "benchmark": {"num_classes": 24, "num_shared": 8, "num_other": 2, "dim": 8, "latent_dim": 4, "clusters": 4,
                  "imbalance": 4.0, "source_samples_per_class": 20, "target_train_per_class": 8,
                  "eval_per_class": 4},
    "model": {"hidden": 8, "groups": 2},
    "train": {"iterations": 40, "batch_size": 16},
    "analysis": {"overlap_k": [3, 5], "overlap_classes": 10, "lsda_k": 2},
    "seeds": [1, 2, 3, 4, 5]
  })");
}

app::ExperimentConfig tiny() { return app::config_from_json(tiny_json()); }

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("wtx_cli_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) { return read_text_file(p); }

BenchmarkInstance instance(const app::ExperimentConfig& c, std::uint64_t seed) {
  BenchmarkConfig b = c.benchmark;
  b.seed = seed;
  return generate_benchmark(b);
}

int run_binary(const std::string& args) {
  const std::string cmd = std::string(WTX_BINARY) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void write_config(const fs::path& p, const json& j) {
  fs::create_directories(p.parent_path());
  std::ofstream(p) << j.dump();
}

}  // namespace

TEST(Config, DefaultsRoundTrip) {
  const app::ExperimentConfig c;
  EXPECT_EQ(app::config_from_json(app::to_json(c)), c);
  EXPECT_EQ(app::config_from_json(json::object()), c);
  const auto t = tiny();
  EXPECT_EQ(app::config_from_json(app::to_json(t)), t);
}

TEST(Config, BundledDefaultFileMatchesBuiltInDefaults) {
  const auto c = app::load_config(fs::path(WTX_SOURCE_DIR) / "configs" / "default.json");
  EXPECT_EQ(c, app::ExperimentConfig{});
}

TEST(Config, UnknownKeysAreErrors) {
  EXPECT_THROW(app::config_from_json({{"iterations", 5}}), ConfigError);
  EXPECT_THROW(app::config_from_json({{"train", {{"iteratons", 5}}}}), ConfigError);
  EXPECT_THROW(app::config_from_json({{"benchmark", {{"seed", 3}}}}), ConfigError);
}

TEST(Config, WrongTypesAreErrors) {
  EXPECT_THROW(app::config_from_json({{"train", {{"iterations", "5"}}}}), ConfigError);
  EXPECT_THROW(app::config_from_json({{"train", {{"iterations", -5}}}}), ConfigError);
  EXPECT_THROW(app::config_from_json({{"train", {{"iterations", 2.5}}}}), ConfigError);
  EXPECT_THROW(app::config_from_json({{"seeds", 3}}), ConfigError);
  EXPECT_THROW(app::config_from_json(json::array()), ConfigError);
  EXPECT_NO_THROW(app::config_from_json({{"train", {{"alpha", 0}}}}));  // integer for a double
}

TEST(Config, ValuesValidatedUpFront) {
  auto j = tiny_json();
  j["model"]["groups"] = 3;
  EXPECT_THROW(app::config_from_json(j), ConfigError);
  j = tiny_json();
  j["methods"] = {"wtn", "wtn_plsu"};
  EXPECT_THROW(app::config_from_json(j), ConfigError);
  j = tiny_json();
  j["seeds"] = json::array();
  EXPECT_THROW(app::config_from_json(j), ConfigError);
  j = tiny_json();
  j["analysis"]["overlap_k"] = {24};
  EXPECT_THROW(app::config_from_json(j), ConfigError);
  j = tiny_json();
  j["benchmark"]["num_shared"] = 24;
  EXPECT_THROW(app::config_from_json(j), ConfigError);
}

TEST(Config, OverridePrecedence) {
  const auto c = tiny();
  ::unsetenv("WTX_SEED");
  EXPECT_EQ(app::apply_overrides(c, {}).seeds, c.seeds);
  ::setenv("WTX_SEED", "42", 1);
  EXPECT_EQ(app::apply_overrides(c, {}).seeds, (std::vector<std::uint64_t>{42}));
  EXPECT_EQ(app::apply_overrides(c, {7, std::nullopt, std::nullopt}).seeds,
            (std::vector<std::uint64_t>{7}));
  ::setenv("WTX_SEED", "4x", 1);
  EXPECT_THROW(app::apply_overrides(c, {}), ConfigError);
  ::unsetenv("WTX_SEED");
  const auto o = app::apply_overrides(c, {std::nullopt, std::string("wtn"), 0.0});
  EXPECT_EQ(o.variant, "wtn");
  EXPECT_EQ(o.train.alpha, 0.0);
  EXPECT_THROW(app::apply_overrides(c, {std::nullopt, std::string("nope"), std::nullopt}),
               ConfigError);
}

TEST(AtomicDirectory, FailureLeavesNothingBehind) {
  const auto dir = scratch("atomic");
  EXPECT_THROW(app::write_directory(dir, false,
                                    [](const fs::path& tmp) {
                                      write_text_file(tmp / "a.txt", "partial");
                                      throw IoError("boom");
                                    }),
               IoError);
  EXPECT_FALSE(fs::exists(dir));
  fs::path tmp = dir;
  tmp += ".partial";
  EXPECT_FALSE(fs::exists(tmp));
}

TEST(AtomicDirectory, ExistingTargetNeedsOverwrite) {
  const auto dir = scratch("overwrite");
  app::write_directory(dir, false, [](const fs::path& t) { write_text_file(t / "a.txt", "1"); });
  EXPECT_THROW(app::write_directory(dir, false, [](const fs::path&) {}), IoError);
  app::write_directory(dir, true, [](const fs::path& t) { write_text_file(t / "b.txt", "2"); });
  EXPECT_FALSE(fs::exists(dir / "a.txt"));
  EXPECT_EQ(slurp(dir / "b.txt"), "2");
  fs::remove_all(dir);
}

TEST(Runs, ArtifactsEmbedConfigAndNameVariantAndSeed) {
  const auto c = tiny();
  const auto dir = scratch("artifacts");
  app::train_run(c, "ae_wtn", 3, instance(c, 3), dir, false);
  app::eval_run(dir);
  app::analyze_run(dir);
  const json echo = app::run_echo(c, "ae_wtn", 3);
  std::size_t json_files = 0;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (name != "run.json") {
      EXPECT_EQ(name.rfind("ae_wtn_seed3.", 0), 0u) << name;
    }
    if (e.path().extension() == ".json") {
      ++json_files;
      EXPECT_EQ(read_json_file(e.path()).at("config"), echo) << name;
    }
  }
  EXPECT_EQ(json_files, 10u);
  fs::remove_all(dir);
}

TEST(Runs, ExportedWeightsScoreLikeInProcessModel) {
  const auto c = tiny();
  const auto dir = scratch("export");
  const auto inst = instance(c, 2);
  const RunResult r = app::train_run(c, "wtn_plus", 2, inst, dir, false);
  const json m = app::eval_run(dir);
  EXPECT_EQ(m.at("seen"), to_json(r.seen));
  EXPECT_EQ(m.at("novel"), to_json(r.novel));
  const Matrix imported = import_transferred(dir / "wtn_plus_seed2.weights.json");
  EXPECT_EQ(imported, r.model->transfer(inst.source.weights));
  const auto head_w = full_universe_weights(imported, r.head.other.value);
  EXPECT_EQ(matmul_bt(inst.novel_eval.features, head_w),
            matmul_bt(inst.novel_eval.features,
                      full_universe_weights(r.transferred, r.head.other.value)));
  fs::remove_all(dir);
}

TEST(Runs, AlphaZeroKeepsDecoderAndSourceFrozen) {
  auto c = tiny();
  c.train.alpha = 0.0;
  const auto dir = scratch("alpha0");
  app::train_run(c, "ae_wtn", 1, instance(c, 1), dir, false);
  const json rep = read_json_file(dir / "ae_wtn_seed1.report.json");
  EXPECT_EQ(rep.at("decoder_hash_init"), rep.at("decoder_hash_final"));
  EXPECT_EQ(rep.at("source_hash_before"), rep.at("source_hash_after"));
  fs::remove_all(dir);
}

TEST(Runs, SameConfigAndSeedGiveIdenticalBytes) {
  const auto c = tiny();
  const auto a = scratch("det_a");
  const auto b = scratch("det_b");
  app::train_run(c, "ae_wtn", 4, instance(c, 4), a, false);
  app::train_run(c, "ae_wtn", 4, instance(c, 4), b, false);
  app::eval_run(a);
  app::eval_run(b);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(a)) {
    EXPECT_EQ(slurp(e.path()), slurp(b / e.path().filename())) << e.path().filename();
    ++files;
  }
  EXPECT_GE(files, 9u);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Runs, BaselinesExportWithManifest) {
  const auto c = tiny();
  const auto dir = scratch("baseline");
  app::train_run(c, "lsda", 1, instance(c, 1), dir, false);
  const json m = app::eval_run(dir);
  EXPECT_EQ(m.at("method"), "lsda");
  EXPECT_EQ(read_json_file(dir / "lsda_seed1.weights.json.manifest.json").at("variant"), "lsda");
  EXPECT_FALSE(app::analyze_run(dir).contains("norms"));
  fs::remove_all(dir);
}

TEST(Compare, FifteenRunsPlusThreeMedians) {
  const auto c = tiny();
  const auto out = scratch("compare");
  std::ostringstream log;
  const auto t = app::compare_pipeline(c, out, false, 1, false, log);
  ASSERT_EQ(t.rows.size(), 18u);
  for (std::size_t i = 15; i < 18; ++i) EXPECT_TRUE(t.rows[i].median);
  EXPECT_TRUE(fs::exists(out / "table.csv"));
  EXPECT_EQ(read_json_file(out / "table.json").at("rows").size(), 18u);
  EXPECT_THROW(app::compare_pipeline(c, out, false, 1, false, log), IoError);

  // parallel workers produce the same table
  const auto par = scratch("compare_par");
  app::compare_pipeline(c, par, false, 3, false, log);
  EXPECT_EQ(slurp(out / "table.csv"), slurp(par / "table.csv"));

  // re-tabulating the finished runs gives the same table
  std::vector<fs::path> dirs;
  for (auto s : c.seeds)
    for (const auto& m : c.methods) dirs.push_back(out / "runs" / app::run_stem(m, s));
  const auto again = scratch("compare_again");
  app::compare_runs(dirs, again, false);
  EXPECT_EQ(slurp(out / "table.csv"), slurp(again / "table.csv"));
  for (const auto& p : {out, par, again}) fs::remove_all(p);
}

TEST(Compare, RunsFromDifferentBenchmarksRejected) {
  auto c = tiny();
  const auto a = scratch("mix_a");
  const auto b = scratch("mix_b");
  app::train_run(c, "wtn", 1, instance(c, 1), a, false);
  c.benchmark.noise_std = 0.5;
  app::train_run(c, "wtn", 1, instance(c, 1), b, false);
  app::eval_run(a);
  app::eval_run(b);
  EXPECT_THROW(app::compare_runs({a, b}, scratch("mix_out"), false), ConfigError);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Compare, UnevaluatedRunIsStateError) {
  const auto c = tiny();
  const auto dir = scratch("uneval");
  app::train_run(c, "wtn", 1, instance(c, 1), dir, false);
  EXPECT_THROW(app::compare_runs({dir}, scratch("uneval_out"), false), StateError);
  fs::remove_all(dir);
}

TEST(Binary, ExitCodes) {
  const auto dir = scratch("binary");
  write_config(dir / "tiny.json", tiny_json());
  auto bad = tiny_json();
  bad["train"]["learning_rate"] = 0.1;
  write_config(dir / "typo.json", bad);
  auto nan = tiny_json();
  nan["train"]["lr"] = 1e300;
  nan["train"]["other_lr"] = 1e300;
  write_config(dir / "nan.json", nan);

  EXPECT_EQ(run_binary("gradcheck --seeds 1"), 0);
  EXPECT_EQ(run_binary("train --config " + (dir / "missing.json").string()), 2);
  EXPECT_EQ(run_binary("train --config " + (dir / "typo.json").string()), 2);
  EXPECT_EQ(run_binary("train --bogus-flag"), 2);
  EXPECT_EQ(run_binary("train --config " + (dir / "nan.json").string() + " --out " +
                       (dir / "nan_run").string()),
            3);
  EXPECT_FALSE(fs::exists(dir / "nan_run"));

  const std::string run = (dir / "run").string();
  EXPECT_EQ(run_binary("train --config " + (dir / "tiny.json").string() +
                       " --variant ae_wtn --alpha 0 --seed 2 --out " + run),
            0);
  EXPECT_EQ(run_binary("train --config " + (dir / "tiny.json").string() + " --out " + run), 1);
  EXPECT_EQ(run_binary("eval " + run), 0);
  EXPECT_EQ(run_binary("analyze " + run), 0);
  const json echo = read_json_file(dir / "run" / "run.json").at("config");
  EXPECT_EQ(echo.at("seed"), 2);
  EXPECT_EQ(echo.at("train").at("alpha"), 0.0);
  EXPECT_EQ(run_binary("generate --config " + (dir / "tiny.json").string() + " --out " +
                       (dir / "bench").string()),
            0);
  EXPECT_TRUE(fs::exists(dir / "bench" / "manifest.json"));
  fs::remove_all(dir);
}
