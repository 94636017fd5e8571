#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "firtree/error.hpp"
#include "firtree/tree.hpp"
#include "oracles.hpp"

using namespace firtree;

namespace {

std::vector<double> probs(const ResponseTree& t, double eta, double alpha) {
  return category_probabilities(t, PersonTraits{std::vector<double>(t.nodes(), eta)},
                                ItemEasiness{std::vector<double>(t.nodes(), alpha)});
}

double sum(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

}  // namespace

TEST(BranchProbability, Examples) {
  EXPECT_DOUBLE_EQ(branch_probability(0.0, 0.0), 0.5);
  EXPECT_NEAR(branch_probability(1.0, 0.0), 0.731059, 1e-6);
  EXPECT_NEAR(branch_probability(2.0, -1.0), 0.731059, 1e-6);
  // high-precision value of 1 / (1 + e^-1)
  EXPECT_NEAR(branch_probability(1.0, 0.0), 0.7310585786300049, 1e-15);
}

TEST(BranchProbability, RejectsNonFinite) {
  EXPECT_THROW(branch_probability(std::nan(""), 0.0), DomainError);
  EXPECT_THROW(branch_probability(0.0, INFINITY), DomainError);
}

TEST(BranchProbability, StableAtExtremes) {
  EXPECT_EQ(branch_probability(800.0, 0.0), 1.0);
  EXPECT_EQ(branch_probability(-800.0, 0.0), 0.0);
  EXPECT_TRUE(std::isfinite(branch_probability(-40.0, 0.0)));
  EXPECT_GT(branch_probability(-40.0, 0.0), 0.0);
}

TEST(BranchProbability, ComplementSymmetry) {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> draw(0.0, 5.0);
  for (int k = 0; k < 1000; ++k) {
    const double a = draw(rng), b = draw(rng);
    EXPECT_NEAR(branch_probability(a, b) + branch_probability(-a, -b), 1.0, 1e-12);
  }
}

TEST(CategoryProbabilities, Fig1AllZero) {
  const auto p = probs(preset_tree("fig1-5cat"), 0.0, 0.0);
  const std::vector<double> expected{0.125, 0.125, 0.5, 0.125, 0.125};
  for (std::size_t m = 0; m < 5; ++m) EXPECT_DOUBLE_EQ(p[m], expected[m]);
}

TEST(CategoryProbabilities, Fig1CommonTraitOne) {
  const auto p = probs(preset_tree("fig1-5cat"), 1.0, 0.0);
  const double s = oracle::logistic(1.0);
  // path products along each row of the mapping matrix
  const std::vector<double> expected{s * (1 - s) * (1 - s), s * (1 - s) * s, 1 - s, s * s * (1 - s), s * s * s};
  const std::vector<double> rounded{0.052877, 0.143735, 0.268941, 0.143735, 0.390712};
  for (std::size_t m = 0; m < 5; ++m) {
    EXPECT_NEAR(p[m], expected[m], 1e-14);
    EXPECT_NEAR(p[m], rounded[m], 5e-7);
  }
}

TEST(CategoryProbabilities, Fig2AllZero) {
  const auto p = probs(preset_tree("fig2-6cat"), 0.0, 0.0);
  const std::vector<double> expected{0.125, 0.125, 0.25, 0.25, 0.125, 0.125};
  for (std::size_t m = 0; m < 6; ++m) EXPECT_DOUBLE_EQ(p[m], expected[m]);
}

TEST(CategoryProbabilities, LengthMismatch) {
  const auto t = preset_tree("fig1-5cat");
  EXPECT_THROW(category_probabilities(t, PersonTraits{{0.0, 0.0}}, ItemEasiness{{0, 0, 0, 0}}), DimensionError);
  EXPECT_THROW(category_probabilities(t, PersonTraits{{0, 0, 0, 0}}, ItemEasiness{{0.0}}), DimensionError);
}

TEST(CategoryProbabilities, SumToOneAndPositive) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> draw(0.0, 3.0);
  for (const char* name : {"fig1-5cat", "fig2-6cat"}) {
    const auto t = preset_tree(name);
    for (int k = 0; k < 2000; ++k) {
      PersonTraits eta{std::vector<double>(t.nodes())};
      ItemEasiness alpha{std::vector<double>(t.nodes())};
      for (auto& v : eta.values) v = draw(rng);
      for (auto& v : alpha.values) v = draw(rng);
      const auto p = category_probabilities(t, eta, alpha);
      EXPECT_NEAR(sum(p), 1.0, 1e-12);
      for (double x : p) EXPECT_GT(x, 0.0);
    }
  }
}

TEST(CategoryProbabilities, MonotoneInNodePredictor) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> draw(0.0, 1.5);
  for (const char* name : {"fig1-5cat", "fig2-6cat"}) {
    const auto t = preset_tree(name);
    for (int k = 0; k < 200; ++k) {
      PersonTraits eta{std::vector<double>(t.nodes())};
      ItemEasiness alpha{std::vector<double>(t.nodes(), 0.0)};
      for (auto& v : eta.values) v = draw(rng);
      for (std::size_t n = 0; n < t.nodes(); ++n) {
        const auto before = category_probabilities(t, eta, alpha);
        auto bumped = eta;
        bumped.values[n] += 0.3;
        const auto after = category_probabilities(t, bumped, alpha);
        for (std::size_t m = 0; m < t.categories(); ++m) {
          if (t.at(m, n) == Branch::One) EXPECT_GT(after[m], before[m]);
          if (t.at(m, n) == Branch::Zero) EXPECT_LT(after[m], before[m]);
          if (t.at(m, n) == Branch::NA) EXPECT_DOUBLE_EQ(after[m], before[m]);
        }
      }
    }
  }
}

TEST(Presets, ShapesAndRows) {
  const auto f1 = preset_tree("fig1-5cat");
  EXPECT_EQ(f1.categories(), 5u);
  EXPECT_EQ(f1.nodes(), 4u);
  EXPECT_EQ(f1.node_labels(), (std::vector<std::string>{"Z1", "Z2", "Z3", "Z4"}));
  EXPECT_EQ(f1.at(0, 0), Branch::One);
  EXPECT_EQ(f1.at(0, 1), Branch::Zero);
  EXPECT_EQ(f1.at(0, 2), Branch::Zero);
  EXPECT_EQ(f1.at(0, 3), Branch::NA);
  EXPECT_EQ(f1.at(2, 0), Branch::Zero);
  EXPECT_EQ(f1.at(2, 1), Branch::NA);
  const auto f2 = preset_tree("fig2-6cat");
  EXPECT_EQ(f2.categories(), 6u);
  EXPECT_EQ(f2.nodes(), 4u);
  EXPECT_EQ(f2.node_labels(), (std::vector<std::string>{"M", "A_w", "A_s", "E"}));
  EXPECT_EQ(f2.at(5, 3), Branch::One);
  EXPECT_EQ(f2.at(2, 1), Branch::Zero);
  EXPECT_TRUE(validate_tree(f1).valid);
  EXPECT_TRUE(validate_tree(f2).valid);
  EXPECT_THROW(preset_tree("fig3"), DomainError);
}

TEST(Presets, Fig1PathProduct) {
  // P(Y=1) = P(Z1)(1 - P(Z2))(1 - P(Z3)) with distinct node predictors.
  const auto t = preset_tree("fig1-5cat");
  const auto p = category_probabilities(t, PersonTraits{{0.3, -0.4, 1.1, 0.0}}, ItemEasiness{{0.0, 0.0, 0.0, 0.0}});
  EXPECT_NEAR(p[0], oracle::logistic(0.3) * (1 - oracle::logistic(-0.4)) * (1 - oracle::logistic(1.1)), 1e-15);
}

TEST(ValidateTree, DuplicateRows) {
  const ResponseTree t(3, {"a", "b"}, {Branch::Zero, Branch::NA, Branch::Zero, Branch::NA, Branch::One, Branch::Zero});
  const auto report = validate_tree(t);
  EXPECT_FALSE(report.valid);
  EXPECT_NE(report.to_string().find("duplicate category path"), std::string::npos);
}

TEST(ValidateTree, AllNaRow) {
  const ResponseTree t(3, {"a", "b"}, {Branch::NA, Branch::NA, Branch::Zero, Branch::NA, Branch::One, Branch::NA});
  const auto report = validate_tree(t);
  EXPECT_FALSE(report.valid);
  EXPECT_NE(report.to_string().find("all-NA row"), std::string::npos) << report.to_string();
}

TEST(ValidateTree, MissingLeafReportsDeviation) {
  // Two fully crossed nodes give four leaves; (0,0) is missing.
  const ResponseTree t(3, {"a", "b"}, {Branch::One, Branch::One, Branch::One, Branch::Zero, Branch::Zero, Branch::One});
  const auto report = validate_tree(t);
  EXPECT_FALSE(report.valid);
  EXPECT_NE(report.to_string().find("do not sum to 1"), std::string::npos);
  EXPECT_GT(report.max_sum_deviation, 0.0);
  EXPECT_LT(report.max_sum_deviation, 1.0);
  // The deficit is exactly the missing leaf's mass.
  const auto p = category_probabilities(t, PersonTraits{{0.5, -1.0}}, ItemEasiness{{0.0, 0.0}});
  EXPECT_NEAR(1.0 - sum(p), (1 - oracle::logistic(0.5)) * (1 - oracle::logistic(-1.0)), 1e-15);
}

TEST(ResponseTreeType, ShapeChecks) {
  EXPECT_THROW(ResponseTree(3, {"a"}, {Branch::One, Branch::Zero}), DimensionError);
  EXPECT_THROW(ResponseTree(1, {"a"}, {Branch::One}), DimensionError);
}

TEST(TreeSpec, RoundTrip) {
  for (const char* name : {"fig1-5cat", "fig2-6cat"}) {
    const auto t = preset_tree(name);
    const auto text = serialize_tree(t);
    EXPECT_EQ(parse_tree_spec(text), t);
    EXPECT_EQ(tree_digest(parse_tree_spec(text)), tree_digest(t));
  }
  EXPECT_NE(tree_digest(preset_tree("fig1-5cat")), tree_digest(preset_tree("fig2-6cat")));
}

TEST(TreeSpec, NullIsNotZero) {
  const auto t = parse_tree_spec(R"({"M":2,"nodes":["a","b"],"map":[[0,null],[1,0]]})", false);
  EXPECT_EQ(t.at(0, 1), Branch::NA);
  EXPECT_EQ(t.at(1, 1), Branch::Zero);
  EXPECT_NE(serialize_tree(t).find("null"), std::string::npos);
}

TEST(TreeSpec, Errors) {
  try {
    parse_tree_spec(R"({"M":2,"nodes":["a"],"map":[[0],[2]]})");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("entry must be 0, 1, or null"), std::string::npos);
  }
  try {
    parse_tree_spec(R"({"nodes":["a"],"map":[[0],[1]]})");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("\"M\""), std::string::npos);
  }
  EXPECT_THROW(parse_tree_spec(R"({"M":3,"nodes":["a"],"map":[[0],[1]]})"), ParseError);
  EXPECT_THROW(parse_tree_spec(R"({"M":2,"nodes":["a","b"],"map":[[0],[1]]})"), ParseError);
  EXPECT_THROW(parse_tree_spec("{not json"), ParseError);
  // Duplicate rows parse without validation but are rejected with it.
  const char* dup = R"({"M":2,"nodes":["a"],"map":[[0],[0]]})";
  EXPECT_THROW(parse_tree_spec(dup), ParseError);
  EXPECT_NO_THROW(parse_tree_spec(dup, false));
}
