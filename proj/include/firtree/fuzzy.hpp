#pragma once

// Conversion of a rater's model-implied category distribution into a
// four-parameter triangular fuzzy number Trg(c, l, r, omega), plus the
// membership function and the Kaufmann fuzziness index.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "firtree/error.hpp"
#include "firtree/estimation.hpp"
#include "firtree/parallel.hpp"
#include "firtree/ratings.hpp"
#include "firtree/tree.hpp"

namespace firtree {

// P(Y=m), m = 1..M, for one rater x item pair.
class MultiverseDistribution {
 public:
  explicit MultiverseDistribution(std::vector<double> probs) : probs_(std::move(probs)) {
    if (probs_.size() < 2) throw DimensionError("distribution needs at least 2 categories");
    double sum = 0.0;
    for (double p : probs_) {
      if (!std::isfinite(p) || p < 0.0 || p > 1.0) throw DomainError("probabilities must lie in [0, 1]");
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw DomainError("probabilities must sum to 1");
  }

  std::size_t categories() const noexcept { return probs_.size(); }
  double operator[](std::size_t m) const { return probs_[m]; }
  const std::vector<double>& probs() const noexcept { return probs_; }

 private:
  std::vector<double> probs_;
};

struct Tfn4 {
  double c = 0.0;
  double l = 0.0;
  double r = 0.0;
  double omega = 1.0;

  bool degenerate() const noexcept { return l == c && c == r; }
  friend bool operator==(const Tfn4&, const Tfn4&) = default;
};

inline void validate_tfn4(const Tfn4& f) {
  if (!std::isfinite(f.c) || !std::isfinite(f.l) || !std::isfinite(f.r) || !std::isfinite(f.omega))
    throw DomainError("fuzzy number parameters must be finite");
  if (f.l > f.c || f.c > f.r) throw DomainError("fuzzy number requires l <= c <= r");
  if (f.omega < 0.0) throw DomainError("fuzzy number requires omega >= 0");
}

// Left branch owns (l, c], right branch owns (c, r). Endpoints map to 0.
inline double membership(const Tfn4& f, double y) {
  validate_tfn4(f);
  if (y == f.c) return 1.0;
  if (y <= f.l || y >= f.r) return 0.0;
  if (y < f.c) return 1.0 / (1.0 + std::pow((f.c - y) / (y - f.l), f.omega));
  return 1.0 / (1.0 + std::pow((f.r - y) / (y - f.c), -f.omega));
}

struct Moments {
  double mean = 0.0;
  double variance = 0.0;
};

inline Moments multiverse_moments(const MultiverseDistribution& d) {
  Moments out;
  for (std::size_t m = 0; m < d.categories(); ++m) out.mean += static_cast<double>(m + 1) * d[m];
  for (std::size_t m = 0; m < d.categories(); ++m) {
    const double dev = static_cast<double>(m + 1) - out.mean;
    out.variance += dev * dev * d[m];
  }
  return out;
}

struct LinkResult {
  double l = 0.0;
  double r = 0.0;
  bool clamped = false;
};

constexpr double kDegenerateVariance = 1e-9;

// Moment link from (mean, variance) on the unit interval to the endpoints of
// a triangular distribution whose mean equals the beta-form mean
// (1 + c/s) / (2 + 1/s).
inline LinkResult williams_link(double c_norm, double s_norm) {
  if (!std::isfinite(c_norm) || c_norm < 0.0 || c_norm > 1.0) throw DomainError("c_norm must lie in [0, 1]");
  if (!std::isfinite(s_norm) || s_norm < 0.0) throw DomainError("s_norm must be >= 0");
  if (s_norm < kDegenerateVariance) return {c_norm, c_norm, false};

  LinkResult out;
  const double mu = (s_norm + c_norm) / (2.0 * s_norm + 1.0);
  double radicand = 3.5 * s_norm - 3.0 * (c_norm - mu) * (c_norm - mu);
  if (radicand < 0.0) {
    radicand = 0.0;
    out.clamped = true;
  }
  const double h1 = std::sqrt(radicand);
  const double h2 = 0.5 * (h1 + 3.0 * c_norm - 3.0 * mu);
  out.l = c_norm - h2;
  out.r = c_norm - h2 + h1;
  if (out.l < 0.0 || out.l > c_norm) {
    out.l = std::clamp(out.l, 0.0, c_norm);
    out.clamped = true;
  }
  if (out.r < c_norm || out.r > 1.0) {
    out.r = std::clamp(out.r, c_norm, 1.0);
    out.clamped = true;
  }
  return out;
}

// Sum of squared category probabilities.
inline double intensification(const MultiverseDistribution& d) {
  double w = 0.0;
  for (double p : d.probs()) w += p * p;
  return w;
}

// Mean gives the mode, the rescaled moment link gives the support, the
// squared-probability sum gives omega. `clamped` reports any link clamp.
inline Tfn4 convert(const MultiverseDistribution& d, std::size_t categories, bool* clamped = nullptr) {
  if (d.categories() != categories) throw DimensionError("distribution length must equal M");
  const auto span = static_cast<double>(categories - 1);
  const Moments mom = multiverse_moments(d);
  const double c_norm = std::clamp((mom.mean - 1.0) / span, 0.0, 1.0);
  const double s_norm = mom.variance / (span * span);
  const LinkResult link = williams_link(c_norm, s_norm);

  Tfn4 f;
  f.c = std::clamp(mom.mean, 1.0, static_cast<double>(categories));
  if (s_norm < kDegenerateVariance) {
    f.l = f.r = f.c;
  } else {
    f.l = std::clamp(1.0 + span * link.l, 1.0, f.c);
    f.r = std::clamp(1.0 + span * link.r, f.c, static_cast<double>(categories));
  }
  f.omega = intensification(d);
  if (clamped) *clamped = link.clamped;
  return f;
}

struct FuzzyEntry {
  int y = 0;  // 0 when the crisp response is unknown
  Tfn4 tfn;
  bool clamped = false;

  friend bool operator==(const FuzzyEntry&, const FuzzyEntry&) = default;
};

// I x J fuzzy ratings, rater-major.
struct FuzzyRatingMatrix {
  std::size_t raters = 0;
  std::size_t items = 0;
  std::string tree_digest;
  std::vector<FuzzyEntry> entries;

  const FuzzyEntry& operator()(std::size_t i, std::size_t j) const { return entries[i * items + j]; }
};

// Converts every (rater, item) of a fit. `ratings`, when given, fills the
// crisp y column.
inline FuzzyRatingMatrix convert_all(const FitResult& fit, const ResponseTree& tree,
                                     const RatingMatrix* ratings = nullptr, unsigned threads = 1) {
  if (tree_digest(tree) != fit.tree_digest) throw DomainError("tree digest does not match the fit");
  const auto raters = static_cast<std::size_t>(fit.eta_hat.rows());
  const auto items = static_cast<std::size_t>(fit.alpha_hat.rows());
  if (ratings && (ratings->raters() != raters || ratings->items() != items))
    throw DimensionError("ratings shape does not match the fit");
  const std::size_t n = tree.nodes();
  FuzzyRatingMatrix out;
  out.raters = raters;
  out.items = items;
  out.tree_digest = fit.tree_digest;
  out.entries.resize(raters * items);
  parallel_for(raters * items, threads, [&](std::size_t cell) {
    const std::size_t i = cell / items, j = cell % items;
    PersonTraits traits{std::vector<double>(n)};
    ItemEasiness easiness{std::vector<double>(n)};
    for (std::size_t k = 0; k < n; ++k) {
      traits.values[k] = fit.eta_hat(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k));
      easiness.values[k] = fit.alpha_hat(static_cast<Eigen::Index>(j),
                                         static_cast<Eigen::Index>(fit.spec.item_column(k)));
    }
    MultiverseDistribution dist(category_probabilities(tree, traits, easiness));
    auto& e = out.entries[cell];
    e.tfn = convert(dist, tree.categories(), &e.clamped);
    e.y = ratings ? (*ratings)(i, j) : 0;
  });
  return out;
}

// (2/n) * sum |A(y) - delta(y)|, delta(y) = 1 iff A(y) >= 0.5.
inline double kaufmann_index(std::span<const double> memberships) {
  if (memberships.empty()) throw DomainError("Kaufmann index needs at least one membership value");
  double dist = 0.0;
  for (double a : memberships) dist += std::abs(a - (a >= 0.5 ? 1.0 : 0.0));
  return 2.0 * dist / static_cast<double>(memberships.size());
}

constexpr std::size_t kDefaultGridPoints = 201;

// Equally spaced points on [1, M], both ends included.
inline std::vector<double> membership_grid(std::size_t categories, std::size_t points = kDefaultGridPoints) {
  std::vector<double> grid(points);
  const double lo = 1.0, hi = static_cast<double>(categories);
  for (std::size_t k = 0; k < points; ++k)
    grid[k] = points == 1 ? lo : lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(points - 1);
  return grid;
}

// Where the Kaufmann index samples the membership function: the whole
// rating scale [1, M], or the fuzzy number's own support [l, r].
enum class KaufmannUniverse { Scale, Support };

inline double kaufmann_of(const Tfn4& f, std::size_t categories, KaufmannUniverse universe = KaufmannUniverse::Scale,
                          std::size_t points = kDefaultGridPoints) {
  validate_tfn4(f);
  if (points == 0) throw DomainError("Kaufmann grid needs at least one point");
  std::vector<double> grid;
  if (universe == KaufmannUniverse::Scale) {
    grid = membership_grid(categories, points);
  } else {
    if (f.degenerate()) return 0.0;
    grid.resize(points);
    for (std::size_t k = 0; k < points; ++k)
      grid[k] = points == 1 ? f.c : f.l + (f.r - f.l) * static_cast<double>(k) / static_cast<double>(points - 1);
  }
  std::vector<double> values(grid.size());
  for (std::size_t k = 0; k < grid.size(); ++k) values[k] = membership(f, grid[k]);
  return kaufmann_index(values);
}

// Reals use 6 significant digits everywhere in text output.
inline std::string format_real(double x) {
  if (std::isnan(x)) return "NA";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", x);
  return buf;
}

inline std::string format_fuzzy_csv(const FuzzyRatingMatrix& fz) {
  std::string out = "rater,item,y,c,l,r,omega,clamped\n";
  for (std::size_t i = 0; i < fz.raters; ++i) {
    for (std::size_t j = 0; j < fz.items; ++j) {
      const auto& e = fz(i, j);
      out += std::to_string(i + 1) + ',' + std::to_string(j + 1) + ',' + (e.y ? std::to_string(e.y) : "") + ',' +
             format_real(e.tfn.c) + ',' + format_real(e.tfn.l) + ',' + format_real(e.tfn.r) + ',' +
             format_real(e.tfn.omega) + ',' + (e.clamped ? '1' : '0') + '\n';
    }
  }
  return out;
}

inline FuzzyRatingMatrix parse_fuzzy_csv(std::string_view text) {
  FuzzyRatingMatrix fz;
  std::size_t pos = 0, line_no = 0;
  std::size_t max_rater = 0, max_item = 0;
  struct Row {
    std::size_t rater, item;
    FuzzyEntry e;
  };
  std::vector<Row> rows;
  auto real = [&](const std::string& s) {
    try {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used != s.size()) throw ParseError("");
      return v;
    } catch (...) {
      throw ParseError("bad real '" + s + "' on line " + std::to_string(line_no));
    }
  };
  while (pos < text.size()) {
    const auto nl = text.find('\n', pos);
    auto line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() : nl + 1;
    ++line_no;
    if (line_no == 1) {
      if (line != "rater,item,y,c,l,r,omega,clamped") throw ParseError("unexpected fuzzy CSV header");
      continue;
    }
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != 8) throw ParseError("fuzzy CSV line " + std::to_string(line_no) + " needs 8 fields");
    Row row{};
    int iv = 0;
    if (!detail::parse_int(cells[0], iv) || iv < 1) throw ParseError("bad rater on line " + std::to_string(line_no));
    row.rater = static_cast<std::size_t>(iv);
    if (!detail::parse_int(cells[1], iv) || iv < 1) throw ParseError("bad item on line " + std::to_string(line_no));
    row.item = static_cast<std::size_t>(iv);
    if (!cells[2].empty() && !detail::parse_int(cells[2], row.e.y))
      throw ParseError("bad y on line " + std::to_string(line_no));
    row.e.tfn = {real(cells[3]), real(cells[4]), real(cells[5]), real(cells[6])};
    row.e.clamped = cells[7] == "1";
    max_rater = std::max(max_rater, row.rater);
    max_item = std::max(max_item, row.item);
    rows.push_back(row);
  }
  fz.raters = max_rater;
  fz.items = max_item;
  if (rows.size() != fz.raters * fz.items) throw ParseError("fuzzy CSV does not cover a full I x J grid");
  fz.entries.resize(rows.size());
  for (const auto& row : rows) fz.entries[(row.rater - 1) * fz.items + (row.item - 1)] = row.e;
  return fz;
}

}  // namespace firtree
