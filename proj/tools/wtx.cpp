// wtx: generate benchmarks, train transfer networks, evaluate and compare.
//
// Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or
// arguments, 3 non-finite loss during training.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "wtx/app.hpp"

namespace {

using namespace wtx;
namespace fs = std::filesystem;

struct Options {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> variant;
  std::optional<double> alpha;
  bool overwrite = false;
  std::size_t jobs = 1;
  bool grid = false;
  std::size_t seeds = 10;
  std::vector<std::string> runs;
};

app::ExperimentConfig resolve(const Options& o) {
  app::ExperimentConfig c = o.config.empty() ? app::ExperimentConfig{} : app::load_config(o.config);
  return app::apply_overrides(std::move(c), {o.seed, o.variant, o.alpha});
}

fs::path out_or(const Options& o, const fs::path& fallback) {
  return o.out.empty() ? fallback : fs::path(o.out);
}

int run(int argc, char** argv) {
  CLI::App cli{"Weight transfer networks: train, evaluate and compare"};
  cli.require_subcommand(1);
  Options o;

  auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "experiment config (JSON)");
    sub->add_option("--seed", o.seed, "seed override (also WTX_SEED)");
  };

  auto* gen = cli.add_subcommand("generate", "write a benchmark directory");
  add_config(gen);
  gen->add_option("--out", o.out, "output directory")->required();
  gen->add_flag("--overwrite", o.overwrite, "replace an existing directory");

  auto* train = cli.add_subcommand("train", "train one method on one seed");
  add_config(train);
  train->add_option("--out", o.out, "run directory");
  train->add_option("--variant", o.variant, "method to train");
  train->add_option("--alpha", o.alpha, "reconstruction loss weight");
  train->add_flag("--overwrite", o.overwrite, "replace an existing run directory");

  auto* eval = cli.add_subcommand("eval", "score a trained run on the seen and novel splits");
  eval->add_option("run", o.runs, "run directory")->required()->expected(1);

  auto* analyze = cli.add_subcommand("analyze", "neighbour overlap and activation-norm statistics");
  analyze->add_option("run", o.runs, "run directory")->required()->expected(1);

  auto* compare = cli.add_subcommand(
      "compare", "tabulate finished runs, or with --config run the full pipeline");
  add_config(compare);
  compare->add_option("runs", o.runs, "finished run directories");
  compare->add_option("--out", o.out, "output directory");
  compare->add_option("--alpha", o.alpha, "reconstruction loss weight");
  compare->add_option("--jobs", o.jobs, "worker threads")->check(CLI::PositiveNumber);
  compare->add_flag("--grid", o.grid, "add input-norm / group-norm columns");
  compare->add_flag("--overwrite", o.overwrite, "replace an existing output directory");

  auto* grad = cli.add_subcommand("gradcheck", "finite-difference check of every layer and loss");
  grad->add_option("--seeds", o.seeds, "number of seeds")->check(CLI::PositiveNumber);
  grad->add_option("--out", o.out, "write the JSON report here");

  try {
    cli.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = cli.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (*gen) {
    const auto c = resolve(o);
    app::generate(c, c.seeds.front(), o.out, o.overwrite);
    std::cout << "wrote " << o.out << '\n';
  } else if (*train) {
    const auto c = resolve(o);
    const std::uint64_t seed = c.seeds.front();
    BenchmarkConfig b = c.benchmark;
    b.seed = seed;
    const auto inst = generate_benchmark(b);
    const fs::path dir = out_or(o, fs::path(c.output_dir) / app::run_stem(c.variant, seed));
    const auto r = app::train_run(c, c.variant, seed, inst, dir, o.overwrite);
    std::cout << "wrote " << dir.string() << "  final l_cls " << r.report.final_cls << '\n';
  } else if (*eval) {
    const auto m = app::eval_run(o.runs.front());
    std::cout << "seen top-1 " << m.at("seen").at("top1").get<double>() << "  novel top-1 "
              << m.at("novel").at("top1").get<double>() << '\n';
  } else if (*analyze) {
    const auto a = app::analyze_run(o.runs.front());
    std::cout << a.at("overlap").at("mean_overlap").dump() << '\n';
  } else if (*compare) {
    ComparisonTable t;
    if (!o.runs.empty()) {
      if (!o.config.empty()) throw ConfigError("compare: give either run directories or --config");
      std::vector<fs::path> dirs(o.runs.begin(), o.runs.end());
      t = app::compare_runs(dirs, out_or(o, "."), o.grid);
    } else {
      const auto c = resolve(o);
      t = app::compare_pipeline(c, out_or(o, c.output_dir), o.overwrite, o.jobs, o.grid, std::cerr);
    }
    std::cout << to_csv(t);
  } else if (*grad) {
    bool ok = false;
    const auto report = app::gradcheck(o.seeds, ok);
    if (!o.out.empty()) write_json_file(o.out, report);
    std::cout << (ok ? "PASS" : "FAIL") << "  " << report.at("checks").get<std::size_t>()
              << " checks, max relative error " << report.at("max_rel_error").get<double>() << '\n';
    return ok ? 0 : 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const wtx::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const wtx::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
