#pragma once

// Monte-Carlo harness: IRTree data generation, SGR faking perturbation,
// refit + reconversion, and PA / Kaufmann scoring over a factorial design.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <boost/math/special_functions/beta.hpp>
#include <json.hpp>

#include "firtree/error.hpp"
#include "firtree/estimation.hpp"
#include "firtree/fuzzy.hpp"
#include "firtree/parallel.hpp"
#include "firtree/ratings.hpp"
#include "firtree/tree.hpp"

namespace firtree {

enum class FakingDirection { Good, Bad };

// Categories a replaced response may land on: strictly beyond the true one,
// or the true one and beyond (the original SGR kernel, where a replacement
// can reproduce the true value).
enum class ReplacementSupport { Beyond, Inclusive };

struct FakingModel {
  double pi = 0.0;
  double gamma = 1.0;
  double delta = 1.0;
  FakingDirection direction = FakingDirection::Good;
  ReplacementSupport support = ReplacementSupport::Beyond;

  void validate() const {
    if (!(pi >= 0.0 && pi <= 1.0)) throw DomainError("faking probability pi must lie in [0, 1]");
    if (!(gamma > 0.0) || !(delta > 0.0)) throw DomainError("discrete beta shapes must be positive");
  }
};

// P(Y^F = m | Y^T = h), m = 1..M. Under faking-good the pi mass is spread
// over the admissible categories above h (h+1..M, or h..M for the inclusive
// kernel) by splitting (0, 1] into that many equal parts and giving each the
// Beta(gamma, delta) probability of its part; faking-bad mirrors this
// downward.
inline std::vector<double> replacement_distribution(int h, std::size_t categories, const FakingModel& model) {
  model.validate();
  if (h < 1 || static_cast<std::size_t>(h) > categories)
    throw DomainError("true category " + std::to_string(h) + " out of range 1.." + std::to_string(categories));
  std::vector<double> out(categories, 0.0);
  const auto hi = static_cast<std::size_t>(h - 1);
  const bool up = model.direction == FakingDirection::Good;
  const std::size_t beyond = up ? categories - 1 - hi : hi;
  if (beyond == 0 || model.pi == 0.0) {
    out[hi] = 1.0;
    return out;
  }
  const std::size_t first = model.support == ReplacementSupport::Inclusive ? 0 : 1;
  const std::size_t parts = beyond + 1 - first;
  out[hi] = 1.0 - model.pi;
  double prev = 0.0;
  for (std::size_t k = 1; k <= parts; ++k) {
    const double edge = static_cast<double>(k) / static_cast<double>(parts);
    const double cdf = k == parts ? 1.0 : boost::math::ibeta(model.gamma, model.delta, edge);
    const std::size_t offset = first + k - 1;
    const std::size_t target = up ? hi + offset : hi - offset;
    out[target] += model.pi * (cdf - prev);
    prev = cdf;
  }
  return out;
}

inline int sample_category(const std::vector<double>& probs, std::mt19937_64& rng) {
  std::discrete_distribution<int> draw(probs.begin(), probs.end());
  return draw(rng) + 1;
}

// Independently resamples every cell from its replacement distribution.
inline RatingMatrix perturb(const RatingMatrix& y, const FakingModel& model, std::mt19937_64& rng) {
  model.validate();
  if (model.pi == 0.0) return y;
  const std::size_t m = y.categories();
  std::vector<std::vector<double>> table(m);
  for (std::size_t h = 1; h <= m; ++h) table[h - 1] = replacement_distribution(static_cast<int>(h), m, model);
  std::vector<int> values(y.values().size());
  for (std::size_t k = 0; k < values.size(); ++k) values[k] = sample_category(table[y.values()[k] - 1], rng);
  return RatingMatrix(y.raters(), y.items(), m, std::move(values));
}

struct TrueData {
  RatingMatrix ratings;
  Eigen::MatrixXd eta;    // I x N
  Eigen::MatrixXd alpha;  // J x N
  FuzzyRatingMatrix fuzzy;
};

// Common-design generator: one standard-normal trait per rater and one
// N(alpha0, sigma_alpha^2) easiness per item, both repeated across nodes.
inline TrueData generate_true_data(std::size_t raters, std::size_t items, const ResponseTree& tree, double alpha0,
                                   double sigma_alpha, std::mt19937_64& rng) {
  if (raters == 0 || items == 0) throw DimensionError("generate_true_data needs I >= 1 and J >= 1");
  if (!(sigma_alpha >= 0.0)) throw DomainError("sigma_alpha must be >= 0");
  const std::size_t n = tree.nodes();
  const std::size_t m = tree.categories();
  std::normal_distribution<double> std_normal(0.0, 1.0);

  TrueData out;
  out.eta.resize(static_cast<Eigen::Index>(raters), static_cast<Eigen::Index>(n));
  out.alpha.resize(static_cast<Eigen::Index>(items), static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < raters; ++i) out.eta.row(static_cast<Eigen::Index>(i)).setConstant(std_normal(rng));
  for (std::size_t j = 0; j < items; ++j)
    out.alpha.row(static_cast<Eigen::Index>(j)).setConstant(alpha0 + sigma_alpha * std_normal(rng));

  out.fuzzy.raters = raters;
  out.fuzzy.items = items;
  out.fuzzy.tree_digest = tree_digest(tree);
  out.fuzzy.entries.resize(raters * items);
  std::vector<int> values(raters * items);
  PersonTraits traits{std::vector<double>(n)};
  ItemEasiness easiness{std::vector<double>(n)};
  for (std::size_t i = 0; i < raters; ++i) {
    for (std::size_t j = 0; j < items; ++j) {
      for (std::size_t k = 0; k < n; ++k) {
        traits.values[k] = out.eta(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k));
        easiness.values[k] = out.alpha(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(k));
      }
      auto probs = category_probabilities(tree, traits, easiness);
      const int y = sample_category(probs, rng);
      values[i * items + j] = y;
      auto& e = out.fuzzy.entries[i * items + j];
      e.tfn = convert(MultiverseDistribution(std::move(probs)), m, &e.clamped);
      e.y = y;
    }
  }
  out.ratings = RatingMatrix(raters, items, m, std::move(values));
  return out;
}

// 1 - ||est - truth||^2 / ||truth||^2 for one replication.
inline double agreement(const Eigen::MatrixXd& est, const Eigen::MatrixXd& truth) {
  if (est.rows() != truth.rows() || est.cols() != truth.cols()) throw DimensionError("PA needs matched shapes");
  const double denom = truth.squaredNorm();
  if (!(denom > 0.0)) throw DomainError("PA is undefined for a zero-norm truth matrix");
  return 1.0 - (est - truth).squaredNorm() / denom;
}

// Mean agreement over replications.
inline double pa_index(const std::vector<Eigen::MatrixXd>& est, const std::vector<Eigen::MatrixXd>& truth) {
  if (est.size() != truth.size() || est.empty()) throw DimensionError("PA needs the same non-zero number of replications");
  double sum = 0.0;
  for (std::size_t b = 0; b < est.size(); ++b) sum += agreement(est[b], truth[b]);
  return sum / static_cast<double>(est.size());
}

enum class FuzzyParameter { Mode, Spread, Omega };

inline Eigen::MatrixXd parameter_matrix(const FuzzyRatingMatrix& fz, FuzzyParameter which) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(fz.raters), static_cast<Eigen::Index>(fz.items));
  for (std::size_t i = 0; i < fz.raters; ++i)
    for (std::size_t j = 0; j < fz.items; ++j) {
      const auto& t = fz(i, j).tfn;
      out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          which == FuzzyParameter::Mode ? t.c : which == FuzzyParameter::Spread ? t.r - t.l : t.omega;
    }
  return out;
}

// Mean Kaufmann index over all cells of a fuzzy matrix.
inline double mean_kaufmann(const FuzzyRatingMatrix& fz, std::size_t categories,
                            KaufmannUniverse universe = KaufmannUniverse::Scale) {
  std::vector<double> k(fz.entries.size());
  for (std::size_t c = 0; c < k.size(); ++c) k[c] = kaufmann_of(fz.entries[c].tfn, categories, universe);
  return ordered_sum(k) / static_cast<double>(k.size());
}

struct SimConfig {
  ResponseTree tree = preset_tree("fig1-5cat");
  double alpha0 = -1.75;
  double sigma_alpha = 0.25;
  double gamma = 1.0;
  double delta = 1.0;
  FakingDirection direction = FakingDirection::Good;
  ReplacementSupport replacement = ReplacementSupport::Inclusive;
  KaufmannUniverse kaufmann = KaufmannUniverse::Support;
  unsigned threads = 1;
  int max_iter = 500;
  double tol = 1e-5;
};

struct SimDesign {
  std::vector<std::size_t> I_levels{50, 150, 500};
  std::vector<std::size_t> J_levels{10, 20};
  std::vector<double> pi_levels{0.0, 0.25, 0.5, 0.75};
  std::size_t B = 1000;
  SimConfig config;
  std::uint64_t seed = 20240901;

  void validate() const {
    if (B < 1) throw DomainError("B must be >= 1");
    if (I_levels.empty() || J_levels.empty() || pi_levels.empty())
      throw DomainError("design levels must be non-empty");
    for (auto i : I_levels)
      if (i == 0) throw DomainError("I levels must be >= 1");
    for (auto j : J_levels)
      if (j == 0) throw DomainError("J levels must be >= 1");
    for (double p : pi_levels)
      if (!(p >= 0.0 && p <= 1.0)) throw DomainError("pi levels must lie in [0, 1]");
  }
};

struct MeanSd {
  double mean = 0.0;
  double sd = 0.0;
};

struct SimRow {
  std::size_t I = 0;
  std::size_t J = 0;
  double pi = 0.0;
  MeanSd pa_c, pa_spread, pa_omega, k;
  std::size_t n_completed = 0;
  std::size_t n_failed = 0;
};

struct SimResult {
  std::vector<SimRow> rows;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline MeanSd summarize(const std::vector<double>& v) {
  MeanSd out;
  if (v.empty()) {
    out.mean = out.sd = std::numeric_limits<double>::quiet_NaN();
    return out;
  }
  out.mean = ordered_sum(v) / static_cast<double>(v.size());
  if (v.size() > 1) {
    std::vector<double> sq(v.size());
    for (std::size_t k = 0; k < v.size(); ++k) sq[k] = (v[k] - out.mean) * (v[k] - out.mean);
    out.sd = std::sqrt(ordered_sum(sq) / static_cast<double>(v.size() - 1));
  }
  return out;
}

}  // namespace detail

// Seed of one replication; depends only on (cell seed, replication index).
inline std::uint64_t replication_seed(std::uint64_t cell_seed, std::size_t replication) noexcept {
  return detail::splitmix64(cell_seed ^ detail::splitmix64(0xa5a5a5a5ULL + replication));
}

inline std::uint64_t cell_seed(std::uint64_t master, std::size_t cell) noexcept {
  return detail::splitmix64(master ^ detail::splitmix64(0x5eed0000ULL + cell));
}

struct ReplicationOutcome {
  bool ok = false;
  double pa_c = 0.0, pa_spread = 0.0, pa_omega = 0.0, k = 0.0;
};

// generate -> perturb -> fit (common design) -> convert -> score.
inline ReplicationOutcome run_replication(std::size_t raters, std::size_t items, double pi, const SimConfig& config,
                                          std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto truth = generate_true_data(raters, items, config.tree, config.alpha0, config.sigma_alpha, rng);
  const FakingModel faking{pi, config.gamma, config.delta, config.direction, config.replacement};
  const auto observed = perturb(truth.ratings, faking, rng);

  FitOptions opt;
  opt.max_iter = config.max_iter;
  opt.tol = config.tol;
  opt.threads = 1;
  opt.compute_standard_errors = false;
  ReplicationOutcome out;
  FitResult fitted;
  try {
    fitted = fit(observed, ModelSpec(config.tree), opt);
  } catch (const EstimationError&) {
    return out;
  }
  if (!fitted.converged) return out;
  const auto est = convert_all(fitted, config.tree, &observed);
  out.pa_c = agreement(parameter_matrix(est, FuzzyParameter::Mode), parameter_matrix(truth.fuzzy, FuzzyParameter::Mode));
  out.pa_spread =
      agreement(parameter_matrix(est, FuzzyParameter::Spread), parameter_matrix(truth.fuzzy, FuzzyParameter::Spread));
  out.pa_omega =
      agreement(parameter_matrix(est, FuzzyParameter::Omega), parameter_matrix(truth.fuzzy, FuzzyParameter::Omega));
  out.k = mean_kaufmann(est, config.tree.categories(), config.kaufmann);
  out.ok = true;
  return out;
}

inline SimRow run_cell(std::size_t raters, std::size_t items, double pi, std::size_t replications,
                       const SimConfig& config, std::uint64_t seed) {
  if (replications < 1) throw DomainError("B must be >= 1");
  std::vector<ReplicationOutcome> outcomes(replications);
  parallel_for(replications, config.threads, [&](std::size_t b) {
    outcomes[b] = run_replication(raters, items, pi, config, replication_seed(seed, b));
  });
  SimRow row;
  row.I = raters;
  row.J = items;
  row.pi = pi;
  std::vector<double> pc, ps, po, kk;
  for (const auto& o : outcomes) {
    if (!o.ok) {
      ++row.n_failed;
      continue;
    }
    ++row.n_completed;
    pc.push_back(o.pa_c);
    ps.push_back(o.pa_spread);
    po.push_back(o.pa_omega);
    kk.push_back(o.k);
  }
  row.pa_c = detail::summarize(pc);
  row.pa_spread = detail::summarize(ps);
  row.pa_omega = detail::summarize(po);
  row.k = detail::summarize(kk);
  return row;
}

// One row per (I, J, pi) in that nesting order.
inline SimResult run_study(const SimDesign& design) {
  design.validate();
  SimResult out;
  std::size_t cell = 0;
  for (auto i : design.I_levels)
    for (auto j : design.J_levels)
      for (double p : design.pi_levels)
        out.rows.push_back(run_cell(i, j, p, design.B, design.config, cell_seed(design.seed, cell++)));
  return out;
}

inline SimDesign parse_design(std::string_view text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("malformed design file: ") + e.what());
  }
  if (!doc.is_object()) throw ParseError("design file must be a JSON object");
  SimDesign d;
  auto counts = [&](const char* key, std::vector<std::size_t>& out) {
    if (!doc.contains(key)) return;
    if (!doc[key].is_array()) throw ParseError(std::string("\"") + key + "\" must be an array");
    out.clear();
    for (const auto& v : doc[key]) {
      if (!v.is_number_integer() || v.get<long long>() < 1)
        throw ParseError(std::string("\"") + key + "\" entries must be positive integers");
      out.push_back(static_cast<std::size_t>(v.get<long long>()));
    }
  };
  counts("I", d.I_levels);
  counts("J", d.J_levels);
  if (doc.contains("pi")) {
    if (!doc["pi"].is_array()) throw ParseError("\"pi\" must be an array");
    d.pi_levels.clear();
    for (const auto& v : doc["pi"]) {
      if (!v.is_number()) throw ParseError("\"pi\" entries must be numbers");
      d.pi_levels.push_back(v.get<double>());
    }
  }
  if (doc.contains("B")) {
    if (!doc["B"].is_number_integer()) throw ParseError("\"B\" must be an integer");
    const auto b = doc["B"].get<long long>();
    if (b < 1) throw DomainError("B must be >= 1");
    d.B = static_cast<std::size_t>(b);
  }
  if (doc.contains("tree")) {
    const auto& t = doc["tree"];
    if (t.is_string())
      d.config.tree = preset_tree(t.get<std::string>());
    else
      d.config.tree = tree_from_json(t);
  }
  auto real = [&](const char* key, double& out) {
    if (!doc.contains(key)) return;
    if (!doc[key].is_number()) throw ParseError(std::string("\"") + key + "\" must be a number");
    out = doc[key].get<double>();
  };
  real("alpha0", d.config.alpha0);
  real("sigma_alpha", d.config.sigma_alpha);
  real("gamma", d.config.gamma);
  real("delta", d.config.delta);
  if (doc.contains("direction")) {
    const auto dir = doc["direction"].get<std::string>();
    if (dir == "good")
      d.config.direction = FakingDirection::Good;
    else if (dir == "bad")
      d.config.direction = FakingDirection::Bad;
    else
      throw ParseError("\"direction\" must be \"good\" or \"bad\"");
  }
  if (doc.contains("replacement")) {
    const auto v = doc["replacement"].get<std::string>();
    if (v == "inclusive")
      d.config.replacement = ReplacementSupport::Inclusive;
    else if (v == "beyond")
      d.config.replacement = ReplacementSupport::Beyond;
    else
      throw ParseError("\"replacement\" must be \"inclusive\" or \"beyond\"");
  }
  if (doc.contains("kaufmann")) {
    const auto v = doc["kaufmann"].get<std::string>();
    if (v == "support")
      d.config.kaufmann = KaufmannUniverse::Support;
    else if (v == "scale")
      d.config.kaufmann = KaufmannUniverse::Scale;
    else
      throw ParseError("\"kaufmann\" must be \"support\" or \"scale\"");
  }
  if (doc.contains("seed")) {
    if (!doc["seed"].is_number_integer()) throw ParseError("\"seed\" must be an integer");
    d.seed = doc["seed"].get<std::uint64_t>();
  }
  d.validate();
  return d;
}

inline std::string format_results_csv(const SimResult& res) {
  std::string out = "I,J,pi,pa_c,pa_c_sd,pa_spread,pa_spread_sd,pa_omega,pa_omega_sd,k,k_sd,n_completed,n_failed\n";
  for (const auto& r : res.rows) {
    out += std::to_string(r.I) + ',' + std::to_string(r.J) + ',' + format_real(r.pi) + ',' + format_real(r.pa_c.mean) +
           ',' + format_real(r.pa_c.sd) + ',' + format_real(r.pa_spread.mean) + ',' + format_real(r.pa_spread.sd) +
           ',' + format_real(r.pa_omega.mean) + ',' + format_real(r.pa_omega.sd) + ',' + format_real(r.k.mean) + ',' +
           format_real(r.k.sd) + ',' + std::to_string(r.n_completed) + ',' + std::to_string(r.n_failed) + '\n';
  }
  return out;
}

// Two blocks: PA by (J, I) and K by
// (J, I) x pi.
inline std::string format_results_table(const SimResult& res) {
  auto cell = [](const MeanSd& m) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.3f (%.3f)", m.mean, m.sd);
    return std::string(buf);
  };
  std::string out = "Recovery accuracy (PA)\n";
  char line[256];
  std::snprintf(line, sizeof line, "%-6s %-6s %-6s %-16s %-16s %-16s\n", "J", "I", "pi", "C", "R-L", "W");
  out += line;
  for (const auto& r : res.rows) {
    std::snprintf(line, sizeof line, "%-6zu %-6zu %-6s %-16s %-16s %-16s\n", r.J, r.I, format_real(r.pi).c_str(),
                  cell(r.pa_c).c_str(), cell(r.pa_spread).c_str(), cell(r.pa_omega).c_str());
    out += line;
  }
  out += "\nFuzziness (Kaufmann index)\n";
  std::snprintf(line, sizeof line, "%-6s %-6s %-6s %-16s %-10s\n", "J", "I", "pi", "K", "completed");
  out += line;
  for (const auto& r : res.rows) {
    std::snprintf(line, sizeof line, "%-6zu %-6zu %-6s %-16s %zu/%zu\n", r.J, r.I, format_real(r.pi).c_str(),
                  cell(r.k).c_str(), r.n_completed, r.n_completed + r.n_failed);
    out += line;
  }
  return out;
}

}  // namespace firtree
