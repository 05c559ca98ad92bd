#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "wtx/errors.hpp"
#include "wtx/losses.hpp"
#include "wtx/matrix.hpp"
#include "wtx/matrix_io.hpp"

namespace wtx {

/// Frozen source-classifier weights with the shared / novel partition of its
/// classes. Row i of `weights` belongs to class id i.
struct SourceWeights {
  Matrix weights;
  std::vector<bool> shared_mask;

  [[nodiscard]] std::size_t num_classes() const { return weights.rows(); }
  [[nodiscard]] std::size_t dim() const { return weights.cols(); }
  [[nodiscard]] bool is_shared(std::size_t c) const { return shared_mask.at(c); }
  [[nodiscard]] bool is_novel(std::size_t c) const { return !shared_mask.at(c); }

  [[nodiscard]] std::vector<std::size_t> shared_ids() const {
    std::vector<std::size_t> out;
    for (std::size_t c = 0; c < shared_mask.size(); ++c)
      if (shared_mask[c]) out.push_back(c);
    return out;
  }
  [[nodiscard]] std::vector<std::size_t> novel_ids() const {
    std::vector<std::size_t> out;
    for (std::size_t c = 0; c < shared_mask.size(); ++c)
      if (!shared_mask[c]) out.push_back(c);
    return out;
  }
};

struct BenchmarkConfig {
  std::size_t num_classes = 200;  // |C|
  std::size_t num_shared = 50;    // |S|
  std::size_t num_other = 5;      // |D \ S|
  std::size_t dim = 64;
  std::size_t clusters = 20;
  double imbalance = 28.0;  // max/min source sample count ratio
  std::size_t source_samples_per_class = 100;
  std::size_t target_train_per_class = 50;
  std::size_t eval_per_class = 50;
  double noise_std = 0.3;
  double center_std = 1.0;     // spread of cluster centers
  double prototype_std = 0.5;  // spread of prototypes around their center
  std::size_t latent_dim = 24;  // class structure lives in a random subspace of this rank (0 = dim)
  double multi_label_fraction = 0.10;
  std::size_t source_epochs = 3;
  std::size_t source_batch = 64;
  double source_lr = 0.5;
  double source_weight_decay = 0.1;  // strong decay keeps W_C norms tied to class frequency
  double shared_frequency_bias = 0.0;  // shared classes drawn with weight count^bias (0 = uniform)
  std::uint64_t seed = 1;

  friend bool operator==(const BenchmarkConfig&, const BenchmarkConfig&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(BenchmarkConfig, num_classes, num_shared, num_other, dim,
                                   clusters, imbalance, source_samples_per_class,
                                   target_train_per_class, eval_per_class, noise_std,
                                   center_std, prototype_std, latent_dim, multi_label_fraction,
                                   source_epochs, source_batch, source_lr, shared_frequency_bias,
                                   source_weight_decay, seed)

/// Labelled feature set. `labels[n]` holds the global class ids of example n;
/// `universe` is the ordered list of class ids its label matrix spans.
struct Split {
  std::string name;
  Matrix features;
  std::vector<std::vector<std::size_t>> labels;
  std::vector<std::size_t> primary;
  std::vector<std::size_t> universe;

  [[nodiscard]] std::size_t size() const { return features.rows(); }

  /// Multi-hot label matrix over `universe`.
  [[nodiscard]] Matrix label_matrix() const {
    std::vector<std::size_t> all(size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    return label_matrix(all);
  }

  [[nodiscard]] Matrix label_matrix(std::span<const std::size_t> rows) const {
    std::vector<std::size_t> pos(max_id() + 1, SIZE_MAX);
    for (std::size_t k = 0; k < universe.size(); ++k) pos[universe[k]] = k;
    Matrix out(rows.size(), universe.size());
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t c : labels.at(rows[r]))
        if (c < pos.size() && pos[c] != SIZE_MAX) out(r, pos[c]) = 1.0;
    return out;
  }

 private:
  [[nodiscard]] std::size_t max_id() const {
    std::size_t m = 0;
    for (auto c : universe) m = std::max(m, c);
    for (const auto& l : labels)
      for (auto c : l) m = std::max(m, c);
    return m;
  }
};

/// Synthetic source/target task. Class ids 0..|C|-1 are source classes; ids
/// |C|..|C|+n_other-1 are target-only "other" classes.
struct BenchmarkInstance {
  BenchmarkConfig config;
  SourceWeights source;
  Matrix prototypes;                  // (|C| + n_other) x dim
  std::vector<std::size_t> cluster;  // per prototype row
  std::vector<std::size_t> source_counts;
  double cooccurrence_radius = 0.0;
  Split train;
  Split seen_eval;
  Split novel_eval;

  [[nodiscard]] std::vector<std::size_t> other_ids() const {
    std::vector<std::size_t> out(config.num_other);
    std::iota(out.begin(), out.end(), config.num_classes);
    return out;
  }
  /// Column order used for training and seen evaluation: shared ids, then other ids.
  [[nodiscard]] std::vector<std::size_t> seen_universe() const {
    auto u = source.shared_ids();
    for (auto o : other_ids()) u.push_back(o);
    return u;
  }
  /// Column order for novel evaluation: every source class, then other ids.
  [[nodiscard]] std::vector<std::size_t> full_universe() const {
    std::vector<std::size_t> u(config.num_classes);
    std::iota(u.begin(), u.end(), std::size_t{0});
    for (auto o : other_ids()) u.push_back(o);
    return u;
  }

  [[nodiscard]] const Split& split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "seen_eval" || name == "seen") return seen_eval;
    if (name == "novel_eval" || name == "novel") return novel_eval;
    throw StateError("unknown split '" + name + "'");
  }
};

namespace detail {

inline void validate(const BenchmarkConfig& c) {
  auto fail = [](const std::string& m) { throw ConfigError("benchmark config: " + m); };
  if (c.num_classes < 2) fail("num_classes must be at least 2");
  if (c.num_shared == 0 || c.num_shared >= c.num_classes) fail("need 0 < num_shared < num_classes");
  if (c.dim == 0) fail("dim must be positive");
  if (c.clusters == 0 || c.clusters > c.num_classes) fail("need 1 <= clusters <= num_classes");
  if (!(c.imbalance >= 1.0)) fail("imbalance must be >= 1");
  if (c.target_train_per_class == 0 || c.eval_per_class == 0) fail("per-class counts must be positive");
  if (static_cast<double>(c.source_samples_per_class) / std::sqrt(c.imbalance) < 1.0) {
    fail("source_samples_per_class too small for the requested imbalance");
  }
  if (!(c.noise_std >= 0.0) || !(c.center_std > 0.0) || !(c.prototype_std >= 0.0)) {
    fail("spreads must be non-negative");
  }
  if (!(c.multi_label_fraction >= 0.0 && c.multi_label_fraction < 1.0)) {
    fail("multi_label_fraction must be in [0, 1)");
  }
  if (c.source_batch == 0) fail("source_batch must be positive");
  if (c.latent_dim > c.dim) fail("latent_dim must not exceed dim");
  if (!(c.source_weight_decay >= 0.0)) fail("source_weight_decay must be non-negative");
  if (!(c.shared_frequency_bias >= 0.0)) fail("shared_frequency_bias must be non-negative");
}

/// Source sample count for class at imbalance rank r in [0, 1]: geometric
/// spacing from n*sqrt(rho) down to n/sqrt(rho), so max/min = rho.
inline std::size_t skewed_count(std::size_t n, double rho, double r) {
  return static_cast<std::size_t>(std::llround(static_cast<double>(n) * std::pow(rho, 0.5 - r)));
}

/// One-vs-rest logistic regression (with bias) trained by minibatch SGD on
/// sum-over-classes, mean-over-batch BCE. The bias is discarded on return.
inline Matrix train_source_classifier(const Matrix& x, const std::vector<std::size_t>& y,
                                      std::size_t num_classes, const BenchmarkConfig& cfg,
                                      Rng& rng) {
  const std::size_t d = x.cols();
  Matrix w(num_classes, d);
  std::vector<double> b(num_classes, -std::log(static_cast<double>(num_classes)));
  std::vector<std::size_t> order(x.rows());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<double> z(num_classes);
  for (std::size_t epoch = 0; epoch < cfg.source_epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += cfg.source_batch) {
      const std::size_t stop = std::min(order.size(), start + cfg.source_batch);
      const double scale = cfg.source_lr / static_cast<double>(stop - start);
      Matrix gw(num_classes, d);
      std::vector<double> gb(num_classes, 0.0);
      for (std::size_t t = start; t < stop; ++t) {
        const std::size_t n = order[t];
        auto xn = x.row(n);
        for (std::size_t c = 0; c < num_classes; ++c) {
          double acc = b[c];
          auto wc = w.row(c);
          for (std::size_t j = 0; j < d; ++j) acc += wc[j] * xn[j];
          const double err = sigmoid(acc) - (y[n] == c ? 1.0 : 0.0);
          gb[c] += err;
          auto gc = gw.row(c);
          for (std::size_t j = 0; j < d; ++j) gc[j] += err * xn[j];
        }
      }
      for (std::size_t c = 0; c < num_classes; ++c) {
        b[c] -= scale * gb[c];
        auto wc = w.row(c);
        auto gc = gw.row(c);
        for (std::size_t j = 0; j < d; ++j)
          wc[j] -= scale * gc[j] + cfg.source_lr * cfg.source_weight_decay * wc[j];
      }
    }
  }
  require_finite(w, "source classifier");
  return w;
}

/// r x d matrix with orthonormal rows (Gram-Schmidt on Gaussian draws).
inline Matrix orthonormal_rows(std::size_t r, std::size_t d, Rng& rng) {
  Matrix q = gaussian_sample(rng, r, d, 0.0, 1.0);
  if (r == d) {
    // identity keeps the full-rank case axis aligned
    q = Matrix(d, d);
    for (std::size_t i = 0; i < d; ++i) q(i, i) = 1.0;
    return q;
  }
  for (std::size_t i = 0; i < r; ++i) {
    auto qi = q.row(i);
    for (std::size_t k = 0; k < i; ++k) {
      auto qk = q.row(k);
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += qi[j] * qk[j];
      for (std::size_t j = 0; j < d; ++j) qi[j] -= dot * qk[j];
    }
    double nrm = 0.0;
    for (double v : qi) nrm += v * v;
    nrm = std::sqrt(nrm);
    for (double& v : qi) v /= nrm;
  }
  return q;
}

inline double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    const double d = a[j] - b[j];
    s += d * d;
  }
  return s;
}

struct RawSplit {
  Matrix features;
  std::vector<std::size_t> primary;
};

inline RawSplit draw_split(const Matrix& prototypes, const std::vector<std::size_t>& classes,
                           std::size_t per_class, double noise_std, Rng& rng) {
  RawSplit s{Matrix(classes.size() * per_class, prototypes.cols()), {}};
  std::size_t r = 0;
  for (std::size_t c : classes) {
    for (std::size_t k = 0; k < per_class; ++k, ++r) {
      for (std::size_t j = 0; j < prototypes.cols(); ++j)
        s.features(r, j) = prototypes(c, j) + noise_std * rng.normal();
      s.primary.push_back(c);
    }
  }
  return s;
}

/// Distance from each example to the nearest prototype (within `allowed`)
/// other than its own.
inline std::vector<double> nearest_foreign_distance(const RawSplit& s, const Matrix& prototypes,
                                                    const std::vector<bool>& allowed) {
  std::vector<double> out(s.features.rows());
  for (std::size_t n = 0; n < s.features.rows(); ++n) {
    double best = INFINITY;
    for (std::size_t c = 0; c < prototypes.rows(); ++c) {
      if (c == s.primary[n] || !allowed[c]) continue;
      best = std::min(best, sq_dist(s.features.row(n), prototypes.row(c)));
    }
    out[n] = std::sqrt(best);
  }
  return out;
}

/// Own class plus every class (within `allowed`) whose prototype lies within
/// `radius` of the example.
inline Split label_split(std::string name, RawSplit raw, const Matrix& prototypes, double radius,
                         const std::vector<bool>& allowed, std::vector<std::size_t> universe) {
  Split s;
  s.name = std::move(name);
  s.universe = std::move(universe);
  const double r2 = radius * radius;
  for (std::size_t n = 0; n < raw.features.rows(); ++n) {
    std::vector<std::size_t> l{raw.primary[n]};
    for (std::size_t c = 0; c < prototypes.rows(); ++c) {
      if (c == raw.primary[n] || !allowed[c]) continue;
      if (sq_dist(raw.features.row(n), prototypes.row(c)) <= r2) l.push_back(c);
    }
    std::sort(l.begin(), l.end());
    s.labels.push_back(std::move(l));
  }
  s.features = std::move(raw.features);
  s.primary = std::move(raw.primary);
  return s;
}

}  // namespace detail

/// Builds a reproducible synthetic source/target task:
/// clustered prototypes, a trained (hence norm-imbalanced) source classifier,
/// and target features drawn around prototypes with multi-hot labels.
inline BenchmarkInstance generate_benchmark(const BenchmarkConfig& cfg) {
  detail::validate(cfg);
  const Rng root(cfg.seed);
  Rng proto_rng = root.fork(1);
  Rng source_rng = root.fork(2);
  Rng target_rng = root.fork(3);
  Rng split_rng = root.fork(4);

  BenchmarkInstance inst;
  inst.config = cfg;
  const std::size_t n_c = cfg.num_classes;
  const std::size_t n_all = n_c + cfg.num_other;

  // (1) cluster centers and prototypes in a random latent subspace; every
  // cluster gets at least one source class
  const std::size_t r = cfg.latent_dim == 0 ? cfg.dim : cfg.latent_dim;
  Matrix centers = gaussian_sample(proto_rng, cfg.clusters, r, 0.0, cfg.center_std);
  Matrix latent(n_all, r);
  inst.cluster.resize(n_all);
  for (std::size_t c = 0; c < n_all; ++c) {
    const std::size_t k = c < cfg.clusters ? c : proto_rng.uniform_index(cfg.clusters);
    inst.cluster[c] = k;
    for (std::size_t j = 0; j < r; ++j)
      latent(c, j) = centers(k, j) + cfg.prototype_std * proto_rng.normal();
  }
  // scaled so that per-coordinate spread matches the full-rank case
  const Matrix basis = detail::orthonormal_rows(r, cfg.dim, proto_rng);
  inst.prototypes = matmul(latent, basis) *
                    std::sqrt(static_cast<double>(cfg.dim) / static_cast<double>(r));

  // (2) source classifier on frequency-skewed samples
  std::vector<std::size_t> rank(n_c);
  std::iota(rank.begin(), rank.end(), std::size_t{0});
  source_rng.shuffle(rank);
  inst.source_counts.resize(n_c);
  std::vector<std::size_t> src_labels;
  for (std::size_t c = 0; c < n_c; ++c) {
    const double r = n_c > 1 ? static_cast<double>(rank[c]) / static_cast<double>(n_c - 1) : 0.0;
    inst.source_counts[c] = std::max<std::size_t>(
        1, detail::skewed_count(cfg.source_samples_per_class, cfg.imbalance, r));
    src_labels.insert(src_labels.end(), inst.source_counts[c], c);
  }
  Matrix src_x(src_labels.size(), cfg.dim);
  for (std::size_t n = 0; n < src_labels.size(); ++n)
    for (std::size_t j = 0; j < cfg.dim; ++j)
      src_x(n, j) = inst.prototypes(src_labels[n], j) + cfg.noise_std * source_rng.normal();
  // (3) frozen from here on
  inst.source.weights = detail::train_source_classifier(src_x, src_labels, n_c, cfg, source_rng);

  // (5) shared / novel split: first |S| of a random order are shared. With a
  // frequency bias the order is a weighted draw without replacement
  // (key u^(1/w), largest first), so detector classes lean towards the
  // classes the source classifier saw most.
  std::vector<std::size_t> order(n_c);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (cfg.shared_frequency_bias == 0.0) {
    split_rng.shuffle(order);
  } else {
    std::vector<double> key(n_c);
    for (std::size_t c = 0; c < n_c; ++c) {
      const double w = std::pow(static_cast<double>(inst.source_counts[c]), cfg.shared_frequency_bias);
      key[c] = std::log(1.0 - split_rng.uniform()) / w;  // uniform() may return 0
    }
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return key[a] > key[b]; });
  }
  inst.source.shared_mask.assign(n_c, false);
  for (std::size_t k = 0; k < cfg.num_shared; ++k) inst.source.shared_mask[order[k]] = true;

  // (4) target features and multi-hot labels
  std::vector<std::size_t> seen_classes = inst.source.shared_ids();
  for (auto o : inst.other_ids()) seen_classes.push_back(o);
  const auto novel_classes = inst.source.novel_ids();

  auto raw_train = detail::draw_split(inst.prototypes, seen_classes, cfg.target_train_per_class,
                                      cfg.noise_std, target_rng);
  auto raw_seen = detail::draw_split(inst.prototypes, seen_classes, cfg.eval_per_class,
                                     cfg.noise_std, target_rng);
  auto raw_novel = detail::draw_split(inst.prototypes, novel_classes, cfg.eval_per_class,
                                      cfg.noise_std, target_rng);

  std::vector<bool> seen_allowed(n_all, false), all_allowed(n_all, true);
  for (auto c : seen_classes) seen_allowed[c] = true;

  // radius such that about multi_label_fraction of training examples carry 2+ labels
  if (cfg.multi_label_fraction > 0.0) {
    auto dists = detail::nearest_foreign_distance(raw_train, inst.prototypes, seen_allowed);
    std::sort(dists.begin(), dists.end());
    const auto idx = static_cast<std::size_t>(
        std::floor(cfg.multi_label_fraction * static_cast<double>(dists.size())));
    inst.cooccurrence_radius = idx == 0 ? 0.0 : 0.5 * (dists[idx - 1] + dists[idx]);
  }

  inst.train = detail::label_split("train", std::move(raw_train), inst.prototypes,
                                   inst.cooccurrence_radius, seen_allowed, inst.seen_universe());
  inst.seen_eval = detail::label_split("seen_eval", std::move(raw_seen), inst.prototypes,
                                       inst.cooccurrence_radius, seen_allowed,
                                       inst.seen_universe());
  inst.novel_eval = detail::label_split("novel_eval", std::move(raw_novel), inst.prototypes,
                                        inst.cooccurrence_radius, all_allowed,
                                        inst.full_universe());
  return inst;
}

/// Uniform sampling with replacement. Labels are multi-hot over the split's universe.
struct Batch {
  Matrix features;
  Matrix labels;
  std::vector<std::size_t> rows;
};

inline Batch sample_batch(const Split& split, std::size_t batch_size, Rng& rng) {
  if (split.size() == 0) throw StateError("sample_batch: split '" + split.name + "' is empty");
  Batch b;
  b.rows.resize(batch_size);
  for (auto& r : b.rows) r = rng.uniform_index(split.size());
  b.features = select_rows(split.features, b.rows);
  b.labels = split.label_matrix(b.rows);
  return b;
}

// ---------------------------------------------------------------------------
// Directory serialization: manifest.json, source_weights.json,
// prototypes.json and <split>_features.csv / <split>_labels.csv.

inline nlohmann::json split_manifest(const Split& s) {
  return {{"name", s.name}, {"size", s.size()}, {"universe", s.universe},
          {"primary", s.primary}, {"labels", s.labels}};
}

inline nlohmann::json benchmark_manifest(const BenchmarkInstance& inst) {
  std::vector<int> mask(inst.source.shared_mask.begin(), inst.source.shared_mask.end());
  return {{"config", inst.config},
          {"shared_mask", mask},
          {"shared_ids", inst.source.shared_ids()},
          {"novel_ids", inst.source.novel_ids()},
          {"other_ids", inst.other_ids()},
          {"cluster", inst.cluster},
          {"source_counts", inst.source_counts},
          {"cooccurrence_radius", inst.cooccurrence_radius},
          {"splits",
           {split_manifest(inst.train), split_manifest(inst.seen_eval),
            split_manifest(inst.novel_eval)}}};
}

inline void save_benchmark(const BenchmarkInstance& inst, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_json_file(dir / "manifest.json", benchmark_manifest(inst));
  save_matrix_json(dir / "source_weights.json", inst.source.weights);
  save_matrix_json(dir / "prototypes.json", inst.prototypes);
  for (const Split* s : {&inst.train, &inst.seen_eval, &inst.novel_eval}) {
    write_text_file(dir / (s->name + "_features.csv"), matrix_to_csv(s->features));
    write_text_file(dir / (s->name + "_labels.csv"), matrix_to_csv(s->label_matrix()));
  }
}

inline BenchmarkInstance load_benchmark(const std::filesystem::path& dir) {
  const auto m = read_json_file(dir / "manifest.json");
  BenchmarkInstance inst;
  inst.config = m.at("config").get<BenchmarkConfig>();
  inst.source.weights = load_matrix_json(dir / "source_weights.json");
  for (int v : m.at("shared_mask").get<std::vector<int>>()) inst.source.shared_mask.push_back(v != 0);
  inst.prototypes = load_matrix_json(dir / "prototypes.json");
  inst.cluster = m.at("cluster").get<std::vector<std::size_t>>();
  inst.source_counts = m.at("source_counts").get<std::vector<std::size_t>>();
  inst.cooccurrence_radius = m.at("cooccurrence_radius").get<double>();
  for (const auto& sj : m.at("splits")) {
    Split s;
    s.name = sj.at("name").get<std::string>();
    s.universe = sj.at("universe").get<std::vector<std::size_t>>();
    s.primary = sj.at("primary").get<std::vector<std::size_t>>();
    s.labels = sj.at("labels").get<std::vector<std::vector<std::size_t>>>();
    s.features = matrix_from_csv(read_text_file(dir / (s.name + "_features.csv")));
    if (s.features.rows() != s.primary.size()) throw IoError("split " + s.name + ": size mismatch");
    if (s.name == "train") inst.train = std::move(s);
    else if (s.name == "seen_eval") inst.seen_eval = std::move(s);
    else if (s.name == "novel_eval") inst.novel_eval = std::move(s);
    else throw IoError("unknown split " + s.name);
  }
  if (inst.source.shared_mask.size() != inst.source.weights.rows()) {
    throw IoError("benchmark: shared mask does not match source weights");
  }
  return inst;
}

}  // namespace wtx
