#pragma once

// IRTree structure: mapping matrices, branch and category probabilities,
// validation, presets and the JSON tree-spec format.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "firtree/error.hpp"

namespace firtree {

// One entry of the mapping matrix. NA means the node is not on the
// category's path; it is never the same thing as Zero.
enum class Branch : std::int8_t { Zero = 0, One = 1, NA = -1 };

class ResponseTree {
 public:
  ResponseTree() = default;

  // `map` is row-major, categories x nodes.
  ResponseTree(std::size_t categories, std::vector<std::string> node_labels, std::vector<Branch> map,
               std::vector<std::string> category_labels = {})
      : m_(categories),
        node_labels_(std::move(node_labels)),
        map_(std::move(map)),
        category_labels_(std::move(category_labels)) {
    if (m_ < 2) throw DimensionError("tree needs at least 2 categories");
    if (node_labels_.empty()) throw DimensionError("tree needs at least 1 node");
    if (map_.size() != m_ * node_labels_.size())
      throw DimensionError("mapping matrix has " + std::to_string(map_.size()) + " entries, expected M*N = " +
                           std::to_string(m_ * node_labels_.size()));
    if (!category_labels_.empty() && category_labels_.size() != m_)
      throw DimensionError("category_labels must have M entries");
  }

  std::size_t categories() const noexcept { return m_; }
  std::size_t nodes() const noexcept { return node_labels_.size(); }

  // Zero-based category and node indices.
  Branch at(std::size_t category, std::size_t node) const { return map_[category * nodes() + node]; }
  std::span<const Branch> row(std::size_t category) const {
    return {map_.data() + category * nodes(), nodes()};
  }

  const std::vector<std::string>& node_labels() const noexcept { return node_labels_; }
  const std::vector<std::string>& category_labels() const noexcept { return category_labels_; }

  friend bool operator==(const ResponseTree&, const ResponseTree&) = default;

 private:
  std::size_t m_ = 0;
  std::vector<std::string> node_labels_;
  std::vector<Branch> map_;
  std::vector<std::string> category_labels_;
};

// Node-wise latent trait of one rater (length N).
struct PersonTraits {
  std::vector<double> values;
};

// Node-wise easiness of one item (length N).
struct ItemEasiness {
  std::vector<double> values;
};

namespace detail {

inline void require_finite(double x, const char* what) {
  if (!std::isfinite(x)) throw DomainError(std::string(what) + " must be finite");
}

// log(1 + exp(x)) without overflow.
inline double log1p_exp(double x) noexcept {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

// Logistic without overflow for large |x|.
inline double logistic(double x) noexcept {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// P(Y=m) for every m given one linear predictor per node. Uses log-space
// factors so that tiny branch probabilities do not underflow to exactly 0
// before the final exponentiation.
inline std::vector<double> category_probabilities_from_predictor(const ResponseTree& tree,
                                                                 std::span<const double> predictor) {
  const std::size_t n = tree.nodes();
  std::vector<double> log_p1(n), log_p0(n);
  for (std::size_t k = 0; k < n; ++k) {
    log_p1[k] = -log1p_exp(-predictor[k]);
    log_p0[k] = -log1p_exp(predictor[k]);
  }
  std::vector<double> probs(tree.categories());
  for (std::size_t m = 0; m < tree.categories(); ++m) {
    double lp = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      switch (tree.at(m, k)) {
        case Branch::One: lp += log_p1[k]; break;
        case Branch::Zero: lp += log_p0[k]; break;
        case Branch::NA: break;
      }
    }
    probs[m] = std::exp(lp);
  }
  return probs;
}

}  // namespace detail

// exp(eta+alpha)/(1+exp(eta+alpha)).
inline double branch_probability(double eta, double alpha) {
  detail::require_finite(eta, "eta");
  detail::require_finite(alpha, "alpha");
  return detail::logistic(eta + alpha);
}

// P(Y=m), m = 1..M, as a product of branch factors along each category's
// path; nodes with NA are skipped.
inline std::vector<double> category_probabilities(const ResponseTree& tree, const PersonTraits& traits,
                                                  const ItemEasiness& easiness) {
  const std::size_t n = tree.nodes();
  if (traits.values.size() != n || easiness.values.size() != n)
    throw DimensionError("traits and easiness must have length N = " + std::to_string(n));
  std::vector<double> predictor(n);
  for (std::size_t k = 0; k < n; ++k) {
    detail::require_finite(traits.values[k], "trait");
    detail::require_finite(easiness.values[k], "easiness");
    predictor[k] = traits.values[k] + easiness.values[k];
  }
  return detail::category_probabilities_from_predictor(tree, predictor);
}

struct ValidationReport {
  bool valid = true;
  std::vector<std::string> problems;
  double max_sum_deviation = 0.0;

  std::string to_string() const {
    std::string out = valid ? "valid" : "invalid";
    for (const auto& p : problems) out += "\n  - " + p;
    char buf[64];
    std::snprintf(buf, sizeof buf, "\n  max |sum P - 1| = %.3g", max_sum_deviation);
    out += buf;
    return out;
  }
};

inline ValidationReport validate_tree(const ResponseTree& tree) {
  constexpr int kDraws = 100;
  constexpr double kSumTolerance = 1e-9;

  ValidationReport report;
  const std::size_t m = tree.categories();
  const std::size_t n = tree.nodes();
  auto fail = [&](std::string msg) {
    report.valid = false;
    report.problems.push_back(std::move(msg));
  };

  for (std::size_t a = 0; a < m; ++a) {
    const auto row = tree.row(a);
    if (std::all_of(row.begin(), row.end(), [](Branch b) { return b == Branch::NA; }))
      fail("category " + std::to_string(a + 1) + " has an all-NA row");
    for (std::size_t b = a + 1; b < m; ++b) {
      if (std::equal(row.begin(), row.end(), tree.row(b).begin()))
        fail("duplicate category path: categories " + std::to_string(a + 1) + " and " + std::to_string(b + 1));
    }
  }

  // Fixed seed so the report itself is reproducible.
  std::mt19937_64 rng(0x5eedULL);
  std::normal_distribution<double> draw(0.0, 2.0);
  std::vector<double> predictor(n);
  for (int d = 0; d < kDraws; ++d) {
    for (auto& x : predictor) x = draw(rng);
    const auto probs = detail::category_probabilities_from_predictor(tree, predictor);
    double sum = 0.0;
    for (double p : probs) sum += p;
    report.max_sum_deviation = std::max(report.max_sum_deviation, std::abs(sum - 1.0));
  }
  if (report.max_sum_deviation > kSumTolerance) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "category probabilities do not sum to 1 (max deviation %.6g)",
                  report.max_sum_deviation);
    fail(buf);
  }
  return report;
}

inline ResponseTree preset_tree(std::string_view name) {
  constexpr Branch O = Branch::One, Z = Branch::Zero, X = Branch::NA;
  if (name == "fig1-5cat") {
    // Z1=1 engages with the item; the middle category stops at the root.
    return ResponseTree(5, {"Z1", "Z2", "Z3", "Z4"},
                        {
                            O, Z, Z, X,  // Y=1
                            O, Z, O, X,  // Y=2
                            Z, X, X, X,  // Y=3
                            O, O, X, Z,  // Y=4
                            O, O, X, O,  // Y=5
                        });
  }
  if (name == "fig2-6cat") {
    // Both extremity nodes share the single E column.
    return ResponseTree(6, {"M", "A_w", "A_s", "E"},
                        {
                            O, X, Z, O,  // Y=1
                            O, X, Z, Z,  // Y=2
                            Z, Z, X, X,  // Y=3
                            Z, O, X, X,  // Y=4
                            O, X, O, Z,  // Y=5
                            O, X, O, O,  // Y=6
                        });
  }
  throw DomainError("unknown preset tree '" + std::string(name) + "' (expected fig1-5cat or fig2-6cat)");
}

inline nlohmann::json tree_to_json(const ResponseTree& tree) {
  nlohmann::json doc;
  doc["M"] = tree.categories();
  doc["nodes"] = tree.node_labels();
  auto map = nlohmann::json::array();
  for (std::size_t m = 0; m < tree.categories(); ++m) {
    auto row = nlohmann::json::array();
    for (Branch b : tree.row(m)) {
      if (b == Branch::NA)
        row.push_back(nullptr);
      else
        row.push_back(static_cast<int>(b));
    }
    map.push_back(std::move(row));
  }
  doc["map"] = std::move(map);
  if (!tree.category_labels().empty()) doc["categories"] = tree.category_labels();
  return doc;
}

inline std::string serialize_tree(const ResponseTree& tree) { return tree_to_json(tree).dump(2) + "\n"; }

// Builds a tree from its JSON form. With `check` set, a tree that fails
// validate_tree is rejected; without it the caller validates.
inline ResponseTree tree_from_json(const nlohmann::json& doc, bool check = true) {
  if (!doc.is_object()) throw ParseError("tree spec must be a JSON object");
  for (const char* field : {"M", "nodes", "map"}) {
    if (!doc.contains(field)) throw ParseError(std::string("tree spec is missing field \"") + field + "\"");
  }
  if (!doc["M"].is_number_integer() || doc["M"].get<long long>() < 2)
    throw ParseError("field \"M\" must be an integer >= 2");
  const auto m = static_cast<std::size_t>(doc["M"].get<long long>());

  const auto& nodes = doc["nodes"];
  if (!nodes.is_array() || nodes.empty()) throw ParseError("field \"nodes\" must be a non-empty array of strings");
  std::vector<std::string> labels;
  for (const auto& v : nodes) {
    if (!v.is_string()) throw ParseError("field \"nodes\" must contain strings");
    labels.push_back(v.get<std::string>());
  }
  const std::size_t n = labels.size();

  const auto& map = doc["map"];
  if (!map.is_array()) throw ParseError("field \"map\" must be an array of rows");
  if (map.size() != m)
    throw ParseError("field \"map\" has " + std::to_string(map.size()) + " rows but M = " + std::to_string(m));
  std::vector<Branch> entries;
  entries.reserve(m * n);
  for (std::size_t r = 0; r < m; ++r) {
    const auto& row = map[r];
    if (!row.is_array() || row.size() != n)
      throw ParseError("row " + std::to_string(r + 1) + " of \"map\" must have N = " + std::to_string(n) +
                       " entries");
    for (const auto& v : row) {
      if (v.is_null()) {
        entries.push_back(Branch::NA);
      } else if (v.is_number_integer() && (v.get<long long>() == 0 || v.get<long long>() == 1)) {
        entries.push_back(v.get<long long>() == 1 ? Branch::One : Branch::Zero);
      } else {
        throw ParseError("map entry must be 0, 1, or null (row " + std::to_string(r + 1) + ")");
      }
    }
  }

  std::vector<std::string> cat_labels;
  if (doc.contains("categories")) {
    const auto& cats = doc["categories"];
    if (!cats.is_array() || cats.size() != m) throw ParseError("field \"categories\" must have M strings");
    for (const auto& v : cats) {
      if (!v.is_string()) throw ParseError("field \"categories\" must contain strings");
      cat_labels.push_back(v.get<std::string>());
    }
  }

  ResponseTree tree(m, std::move(labels), std::move(entries), std::move(cat_labels));
  if (check) {
    const auto report = validate_tree(tree);
    if (!report.valid) throw ParseError("invalid tree: " + report.problems.front());
  }
  return tree;
}

inline ResponseTree parse_tree_spec(std::string_view text, bool check = true) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("malformed tree spec: ") + e.what());
  }
  return tree_from_json(doc, check);
}

// FNV-1a over the compact canonical JSON form, as 16 hex digits.
inline std::string tree_digest(const ResponseTree& tree) {
  const std::string canonical = tree_to_json(tree).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : canonical) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace firtree
