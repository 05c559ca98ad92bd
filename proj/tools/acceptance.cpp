// Acceptance suite: prints one PASS/FAIL line per criterion, then a summary
// table of the per-method medians. The exit status is 0 whenever every
// criterion was evaluated, including when some of them fail; a crash or an
// unexpected exception exits nonzero.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "wtx/app.hpp"
#include "wtx/gradcheck.hpp"

namespace {

using namespace wtx;
namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

struct Verdict {
  int id;
  std::string name;
  bool pass;
  std::string detail;
};

std::vector<Verdict> verdicts;

void report(int id, const std::string& name, bool pass, const std::string& detail) {
  verdicts.push_back({id, name, pass, detail});
  std::cout << (pass ? "PASS" : "FAIL") << "  " << id << ". " << name << ": " << detail
            << std::endl;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// ---------------------------------------------------------------------------

void gradient_suite() {
  const auto t0 = Clock::now();
  const auto results = run_gradcheck_suite(10);
  const double elapsed = seconds_since(t0);
  double worst = 0.0;
  std::size_t failed = 0;
  std::map<std::string, std::size_t> kinds;
  for (const auto& r : results) {
    worst = std::max(worst, r.max_rel_error);
    failed += !r.passed(kGradTolerance);
    ++kinds[r.name];
  }
  const bool pass = failed == 0 && elapsed < 30.0;
  report(1, "gradient suite", pass,
         fmt("%zu checks over 10 seeds (%zu kinds), %zu failed, max relative error %.3g, %.1f s",
             results.size(), kinds.size(), failed, worst, elapsed));
}

void normalization_invariants() {
  Rng rng(64016);
  const double eps = kStandardizerEpsilon;

  const Matrix w = gaussian_sample(rng, 64, 16, 0.5, 2.0);
  const auto st = InputStandardizer::fit(w, eps);
  const Matrix z = st.apply(w);
  double st_mean = 0.0, st_sd = 0.0;
  for (std::size_t j = 0; j < 16; ++j) {
    double m = 0.0, v = 0.0;
    for (std::size_t i = 0; i < 64; ++i) m += z(i, j) / 64.0;
    for (std::size_t i = 0; i < 64; ++i) v += (z(i, j) - m) * (z(i, j) - m) / 64.0;
    const double expected = st.sigma()[j] / (st.sigma()[j] + eps);
    st_mean = std::max(st_mean, std::abs(m));
    st_sd = std::max(st_sd, std::abs(std::sqrt(v) - expected));
  }

  // normalization proper (epsilon 0); the model's epsilon shifts the
  // variance to raw / (raw + eps), checked against that expectation
  const Matrix x = gaussian_sample(rng, 64, 16, 0.3, 1.7);
  GroupNormLayer exact(16, 4, 0.0);
  exact.forward(x);
  GroupNormLayer smoothed(16, 4, 1e-5);
  smoothed.forward(x);
  double gn_mean = 0.0, gn_var = 0.0, gn_eps_var = 0.0;
  for (std::size_t i = 0; i < 64; ++i)
    for (std::size_t g = 0; g < 4; ++g) {
      double m = 0.0, v = 0.0, raw_m = 0.0, raw_v = 0.0, ve = 0.0;
      for (std::size_t j = 4 * g; j < 4 * g + 4; ++j) {
        m += exact.normalized()(i, j) / 4.0;
        raw_m += x(i, j) / 4.0;
      }
      for (std::size_t j = 4 * g; j < 4 * g + 4; ++j) {
        v += std::pow(exact.normalized()(i, j) - m, 2) / 4.0;
        raw_v += std::pow(x(i, j) - raw_m, 2) / 4.0;
        ve += std::pow(smoothed.normalized()(i, j), 2) / 4.0;
      }
      gn_mean = std::max(gn_mean, std::abs(m));
      gn_var = std::max(gn_var, std::abs(v - 1.0));
      gn_eps_var = std::max(gn_eps_var, std::abs(ve - raw_v / (raw_v + 1e-5)));
    }

  double jump_value = 0.0, jump_grad = 0.0;
  for (double sign : {1.0, -1.0}) {
    const auto lo = smooth_l1(Matrix{{sign * std::nextafter(1.0, 0.0)}}, Matrix{{0}});
    const auto hi = smooth_l1(Matrix{{sign * std::nextafter(1.0, 2.0)}}, Matrix{{0}});
    jump_value = std::max(jump_value, std::abs(lo.value - hi.value));
    jump_grad = std::max(jump_grad, std::abs(lo.gradient(0, 0) - hi.gradient(0, 0)));
  }

  const bool pass = st_mean < 1e-10 && st_sd < 1e-6 && gn_mean < 1e-10 && gn_var < 1e-8 &&
                    gn_eps_var < 1e-12 && jump_value < 1e-12 && jump_grad < 1e-12;
  report(2, "normalization invariants", pass,
         fmt("standardizer |mean| %.2g, |sd - expected| %.2g; groupnorm |mean| %.2g, "
             "|var - 1| %.2g (eps-adjusted %.2g); smooth-L1 jump value %.2g, gradient %.2g",
             st_mean, st_sd, gn_mean, gn_var, gn_eps_var, jump_value, jump_grad));
}

// ---------------------------------------------------------------------------

struct SeedRuns {
  std::map<std::string, RunResult> by_method;
};

struct Study {
  std::vector<std::uint64_t> seeds;
  std::vector<SeedRuns> runs;
  std::map<std::string, double> train_seconds;
  double generate_seconds = 0.0;

  [[nodiscard]] double med(const std::string& method,
                           const std::function<double(const RunResult&)>& f) const {
    std::vector<double> v;
    for (const auto& s : runs) v.push_back(f(s.by_method.at(method)));
    return median(v);
  }
};

const std::vector<std::string> kStudyMethods = {"wtn",      "wtn_input_norm", "wtn_group_norm",
                                                "wtn_plus", "ae_wtn",         "wtn_plus_classbn"};

Study run_study(const app::ExperimentConfig& c) {
  Study st;
  st.seeds = c.seeds;
  for (auto seed : c.seeds) {
    auto t0 = Clock::now();
    BenchmarkConfig b = c.benchmark;
    b.seed = seed;
    const auto inst = generate_benchmark(b);
    st.generate_seconds += seconds_since(t0);
    SeedRuns sr;
    for (const auto& m : kStudyMethods) {
      TrainConfig tc = c.train;
      tc.seed = seed;
      const ModelDims dims{inst.config.dim, c.model.hidden, inst.config.dim, c.model.groups};
      t0 = Clock::now();
      sr.by_method.emplace(m, run_method(inst, m, dims, tc, c.analysis));
      st.train_seconds[m] += seconds_since(t0);
      std::cerr << "seed " << seed << " " << m << " done\n";
    }
    st.runs.push_back(std::move(sr));
  }
  return st;
}

double novel(const RunResult& r) { return r.novel.top1; }
double seen(const RunResult& r) { return r.seen.top1; }
double final_cls(const RunResult& r) { return r.report.final_cls; }

void table_ordering(const Study& st) {
  const double ae = st.med("ae_wtn", novel), plus = st.med("wtn_plus", novel),
               wtn = st.med("wtn", novel);
  const double ae_seen = st.med("ae_wtn", seen), plus_seen = st.med("wtn_plus", seen);
  const double runtime = st.generate_seconds + st.train_seconds.at("wtn") +
                         st.train_seconds.at("wtn_plus") + st.train_seconds.at("ae_wtn");
  const bool pass = ae > plus && plus > wtn && ae_seen >= plus_seen && runtime < 600.0;
  report(3, "transfer ordering on novel and seen classes", pass,
         fmt("median novel top-1 ae_wtn %.4f, wtn_plus %.4f, wtn %.4f; seen top-1 ae_wtn %.4f, "
             "wtn_plus %.4f; %zu seeds, %.0f s",
             ae, plus, wtn, ae_seen, plus_seen, st.seeds.size(), runtime));
}

void normalization_grid(const Study& st) {
  const double plus = st.med("wtn_plus", novel), in = st.med("wtn_input_norm", novel),
               gn = st.med("wtn_group_norm", novel), none = st.med("wtn", novel);
  const bool pass = plus > in && plus > gn && plus > none;
  report(4, "normalization grid", pass,
         fmt("median novel top-1 both %.4f, input only %.4f, group only %.4f, neither %.4f",
             plus, in, gn, none));
}

void neighbour_overlap(const Study& st, const app::ExperimentConfig& c) {
  bool pass = true;
  std::string detail;
  for (std::size_t k : {10, 20}) {
    auto at = [k](const RunResult& r) { return r.overlap.at(k); };
    const double ae = st.med("ae_wtn", at), plus = st.med("wtn_plus", at),
                 wtn = st.med("wtn", at);
    pass = pass && ae >= plus && plus >= wtn && ae > wtn;
    detail += fmt("k=%zu ae_wtn %.2f, wtn_plus %.2f, wtn %.2f; ", k, ae, plus, wtn);
  }
  // identity: a matrix against itself
  BenchmarkConfig b = c.benchmark;
  b.seed = c.seeds.front();
  const Matrix& w = generate_benchmark(b).source.weights;
  std::vector<std::size_t> ks;
  for (std::size_t k = 1; k < w.rows(); k += 7) ks.push_back(k);
  Rng rng(c.analysis.eval_seed);
  const auto self = nn_overlap(w, w, ks, c.analysis.overlap_classes, rng);
  bool exact = true;
  for (std::size_t i = 0; i < ks.size(); ++i)
    exact = exact && self.mean_overlap[i] == static_cast<double>(ks[i]);
  pass = pass && exact;
  detail += fmt("identity overlap(k) == k for %zu values of k: %s", ks.size(),
                exact ? "yes" : "no");
  report(5, "neighbour overlap", pass, detail);
}

void norm_variance(const Study& st) {
  std::vector<double> bn, gn;
  for (const auto& s : st.runs) {
    bn.push_back(s.by_method.at("wtn_plus_classbn").norms->variance_ratio());
    gn.push_back(s.by_method.at("wtn_plus").norms->variance_ratio());
  }
  const auto [gn_lo, gn_hi] = std::minmax_element(gn.begin(), gn.end());
  const auto [bn_lo, bn_hi] = std::minmax_element(bn.begin(), bn.end());
  const double bn_med = median(bn), gn_med = median(gn);
  const bool pass = bn_med > gn_med && gn_med >= 1.0 / 3.0 && gn_med <= 3.0;
  report(6, "novel/shared activation-norm variance ratio", pass,
         fmt("median class-batch norm %.3f (%.3f to %.3f), group norm %.3f (%.3f to %.3f)",
             bn_med, *bn_lo, *bn_hi, gn_med, *gn_lo, *gn_hi));
}

void training_loss(const Study& st) {
  const double ae = st.med("ae_wtn", final_cls), plus = st.med("wtn_plus", final_cls);
  report(7, "final classification loss", ae <= plus,
         fmt("median final l_cls ae_wtn %.5f, wtn_plus %.5f", ae, plus));
}

// ---------------------------------------------------------------------------

void contracts(const Study& st, const app::ExperimentConfig& c, const fs::path& scratch) {
  std::size_t untouched = 0, total = 0;
  for (const auto& s : st.runs)
    for (const auto& [m, r] : s.by_method) {
      ++total;
      untouched += r.report.source_hash_before == r.report.source_hash_after;
    }

  const std::uint64_t seed = c.seeds.front();
  BenchmarkConfig b = c.benchmark;
  b.seed = seed;
  const auto inst = generate_benchmark(b);
  const std::uint64_t wc_hash = matrix_hash(inst.source.weights);

  const RunResult& r = st.runs.front().by_method.at("ae_wtn");
  const fs::path wpath = scratch / "export" / "ae_wtn.weights.json";
  fs::create_directories(wpath.parent_path());
  export_transferred(*r.model, inst.source, wpath, app::run_echo(c, "ae_wtn", seed));
  const Matrix back = import_transferred(wpath);
  bool bitwise = back == r.transferred;
  for (const Split* split : {&inst.seen_eval, &inst.novel_eval})
    bitwise = bitwise &&
              r.head.score(split->features, back) == r.head.score(split->features, r.transferred);

  TrainConfig tc = c.train;
  tc.seed = seed;
  tc.alpha = 0.0;
  const ModelDims dims{inst.config.dim, c.model.hidden, inst.config.dim, c.model.groups};
  const RunResult z = run_method(inst, "ae_wtn", dims, tc, c.analysis);
  bool decoder_init = z.report.decoder_hash_init == z.report.decoder_hash_final;
  TransferModel init = *z.model_init, trained = *z.model;
  const auto before = init.decoder_parameters();
  const auto after = trained.decoder_parameters();
  decoder_init = decoder_init && before.size() == after.size() && !after.empty();
  for (std::size_t i = 0; decoder_init && i < after.size(); ++i)
    decoder_init = before[i]->value == after[i]->value;

  const bool wc_same = matrix_hash(inst.source.weights) == wc_hash &&
                       z.report.source_hash_before == z.report.source_hash_after;
  const bool pass = untouched == total && wc_same && bitwise && decoder_init;
  report(8, "freeze, export and alpha=0 contracts", pass,
         fmt("W_C hash unchanged in %zu/%zu runs and the alpha=0 run: %s; export/import/score "
             "bitwise: %s; alpha=0 decoder at init: %s",
             untouched, total, wc_same ? "yes" : "no", bitwise ? "yes" : "no",
             decoder_init ? "yes" : "no"));
}

void determinism(const app::ExperimentConfig& c, const fs::path& scratch) {
  const std::uint64_t seed = c.seeds.front();
  BenchmarkConfig b = c.benchmark;
  b.seed = seed;
  const auto inst = generate_benchmark(b);
  const fs::path a = scratch / "det_a", bdir = scratch / "det_b";
  app::train_run(c, "ae_wtn", seed, inst, a, true);
  app::train_run(c, "ae_wtn", seed, generate_benchmark(b), bdir, true);
  std::size_t files = 0, same = 0;
  for (const auto& e : fs::directory_iterator(a)) {
    ++files;
    const fs::path other = bdir / e.path().filename();
    same += fs::exists(other) && read_bytes(e.path()) == read_bytes(other);
  }
  const auto stem = app::run_stem("ae_wtn", seed);
  const bool key_files = fs::exists(a / (stem + ".report.json")) &&
                         fs::exists(a / (stem + ".weights.json"));
  const bool pass = key_files && files > 0 && same == files;
  report(9, "determinism", pass,
         fmt("ae_wtn seed %llu trained twice: %zu/%zu run files byte-identical "
             "(report, loss curve, exported weights, manifest, parameters)",
             static_cast<unsigned long long>(seed), same, files));
}

// ---------------------------------------------------------------------------

void print_summary(const Study& st) {
  std::cout << "\nmethod,novel_top1,seen_top1,overlap10,overlap20,final_cls,norm_var_ratio,"
               "train_seconds\n";
  for (const auto& m : kStudyMethods) {
    std::cout << fmt("%s,%.4f,%.4f,%.2f,%.2f,%.5f,%.3f,%.1f\n", m.c_str(), st.med(m, novel),
                     st.med(m, seen), st.med(m, [](const RunResult& r) { return r.overlap.at(10); }),
                     st.med(m, [](const RunResult& r) { return r.overlap.at(20); }),
                     st.med(m, final_cls),
                     st.med(m, [](const RunResult& r) { return r.norms->variance_ratio(); }),
                     st.train_seconds.at(m));
  }
}

json summary_json(const Study& st) {
  json j = json::object();
  j["criteria"] = json::array();
  for (const auto& v : verdicts)
    j["criteria"].push_back({{"id", v.id}, {"name", v.name}, {"pass", v.pass}, {"detail", v.detail}});
  for (const auto& m : kStudyMethods) {
    json per_seed = json::array();
    for (std::size_t i = 0; i < st.runs.size(); ++i) {
      const auto& r = st.runs[i].by_method.at(m);
      per_seed.push_back({{"seed", st.seeds[i]},
                          {"novel_top1", r.novel.top1},
                          {"seen_top1", r.seen.top1},
                          {"overlap", to_json(r.overlap)},
                          {"final_cls", r.report.final_cls},
                          {"norms", to_json(*r.norms)}});
    }
    j["methods"][m] = per_seed;
  }
  return j;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App cli{"Acceptance suite for the weight transfer networks"};
  std::string config_path, out;
  cli.add_option("--config", config_path, "experiment config (defaults when omitted)");
  cli.add_option("--out", out, "write a JSON report here");
  CLI11_PARSE(cli, argc, argv);

  try {
    const app::ExperimentConfig c =
        config_path.empty() ? app::ExperimentConfig{} : app::load_config(config_path);
    app::validate(c);
    const fs::path scratch = fs::temp_directory_path() / "wtx_acceptance";
    fs::remove_all(scratch);
    fs::create_directories(scratch);

    gradient_suite();
    normalization_invariants();
    const Study st = run_study(c);
    table_ordering(st);
    normalization_grid(st);
    neighbour_overlap(st, c);
    norm_variance(st);
    training_loss(st);
    contracts(st, c, scratch);
    determinism(c, scratch);
    print_summary(st);

    const auto passed = std::count_if(verdicts.begin(), verdicts.end(),
                                      [](const Verdict& v) { return v.pass; });
    std::cout << "\n" << passed << "/" << verdicts.size() << " criteria passed\n";
    if (!out.empty()) write_json_file(out, summary_json(st));
    fs::remove_all(scratch);
  } catch (const std::exception& e) {
    std::cerr << "acceptance aborted: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
