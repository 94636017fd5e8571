#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "firtree/cli.hpp"

using namespace firtree;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome run_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("firtree_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }
  std::string write(const std::string& name, const std::string& text) const {
    detail::write_text_file(path(name), text);
    return path(name);
  }
  std::string read(const std::string& name) const { return detail::read_text_file(path(name)); }

  std::string simulated_ratings(std::size_t raters, std::size_t items, std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    return write("ratings.csv",
                 format_ratings_csv(generate_true_data(raters, items, preset_tree("fig1-5cat"), -1.75, 0.25, rng).ratings));
  }

 private:
  fs::path dir_;
};

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST_F(Cli, ValidateTree) {
  EXPECT_EQ(run_cli({"validate-tree", "--preset", "fig1-5cat"}).code, 0);
  EXPECT_EQ(run_cli({"validate-tree", "--preset", "fig2-6cat"}).code, 0);
  const auto dup = write("dup.json", R"({"M":3,"nodes":["a","b"],"map":[[0,null],[0,null],[1,0]]})");
  const auto r = run_cli({"validate-tree", "--tree", dup});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("duplicate category path"), std::string::npos);
  EXPECT_EQ(run_cli({"validate-tree", "--tree", path("missing.json")}).code, 2);
  EXPECT_EQ(run_cli({"validate-tree", "--tree", write("bad.json", "{nope")}).code, 1);
}

TEST_F(Cli, EvalPoint) {
  auto r = run_cli({"eval", "--c", "3", "--l", "2", "--r", "4", "--omega", "1", "--y", "2.5"});
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.out, "0.5\n");
  r = run_cli({"eval", "--c", "3", "--l", "2", "--r", "4", "--omega", "0.5", "--y", "2.2"});
  EXPECT_EQ(r.out, "0.333333\n");
  EXPECT_EQ(run_cli({"eval", "--c", "3", "--l", "3.5", "--r", "4", "--y", "3"}).code, 1);
  EXPECT_EQ(run_cli({"eval", "--c", "3", "--l", "2", "--r", "2.5", "--y", "3"}).code, 1);
  EXPECT_EQ(run_cli({"eval", "--c", "3", "--l", "2", "--r", "4"}).code, 1);
}

TEST_F(Cli, EvalGrid) {
  const auto r = run_cli({"eval", "--c", "3.13", "--l", "2", "--r", "4", "--omega", "0.7", "--grid"});
  ASSERT_EQ(r.code, 0);
  const auto rows = lines(r.out);
  EXPECT_EQ(rows.front(), "y,membership");
  EXPECT_EQ(rows.size(), 1u + 201u + 1u);
  bool peak = false, left = false, right = false;
  for (std::size_t k = 1; k < rows.size(); ++k) {
    if (rows[k] == "3.13,1") peak = true;
    if (rows[k] == "2,0") left = true;
    if (rows[k] == "4,0") right = true;
  }
  EXPECT_TRUE(peak);
  EXPECT_TRUE(left);
  EXPECT_TRUE(right);
}

TEST_F(Cli, FitReportsOutOfRangeCell) {
  const auto ratings = write("bad.csv", "1,2,3\n4,7,1\n");
  const auto r = run_cli({"fit", "--ratings", ratings, "--out", path("fit.json")});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("row 2"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("column 2"), std::string::npos) << r.err;
  EXPECT_EQ(run_cli({"fit", "--ratings", path("none.csv"), "--out", path("fit.json")}).code, 2);
}

TEST_F(Cli, FitSingleRaterWarns) {
  const auto ratings = write("one.csv", "5,5,5,4\n");
  const auto r = run_cli({"fit", "--ratings", ratings, "--out", path("fit.json"), "--no-se"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.err.find("warning:"), std::string::npos);
  EXPECT_TRUE(fs::exists(path("fit.json")));
}

TEST_F(Cli, FitIsByteIdenticalOnRerun) {
  const auto ratings = simulated_ratings(500, 20, 3);
  ASSERT_EQ(run_cli({"fit", "--ratings", ratings, "--out", path("a.json")}).code, 0);
  const auto r = run_cli({"fit", "--ratings", ratings, "--out", path("b.json")});
  ASSERT_EQ(r.code, 0);
  EXPECT_EQ(read("a.json"), read("b.json"));
  EXPECT_NE(r.out.find("converged true"), std::string::npos);
  const auto fitted = parse_fit(read("a.json"));
  EXPECT_NEAR(fitted.alpha_hat.mean(), -1.75, 0.15);
}

TEST_F(Cli, FitPerNodeDesign) {
  const auto ratings = simulated_ratings(200, 8, 4);
  const auto r =
      run_cli({"fit", "--ratings", ratings, "--out", path("p.json"), "--model", "pernode", "--cov", "diag", "--no-se"});
  EXPECT_EQ(r.code, 0) << r.err;
  const auto fitted = parse_fit(read("p.json"));
  EXPECT_EQ(fitted.alpha_hat.cols(), 4);
  EXPECT_EQ(run_cli({"fit", "--ratings", ratings, "--out", path("q.json"), "--cov", "full"}).code, 1);
}

TEST_F(Cli, ConvertZeroFit) {
  FitResult f;
  f.spec = ModelSpec(preset_tree("fig1-5cat"));
  f.tree_digest = tree_digest(f.spec.tree);
  f.alpha_hat = Eigen::MatrixXd::Zero(3, 1);
  f.sigma_cholesky = Eigen::MatrixXd::Identity(1, 1);
  f.eta_hat = Eigen::MatrixXd::Zero(2, 4);
  f.se_alpha = Eigen::MatrixXd::Zero(3, 1);
  f.converged = true;
  const auto artifact = write("zero.json", serialize_fit(f));
  const auto r = run_cli({"convert", "--fit", artifact});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = lines(r.out);
  ASSERT_EQ(rows.size(), 1u + 6u);
  EXPECT_EQ(rows[1], "1,1,,3,1.95417,4.04583,0.3125,0");
  EXPECT_EQ(run_cli({"convert", "--fit", artifact, "--preset", "fig2-6cat"}).code, 1);
  EXPECT_EQ(run_cli({"convert", "--fit", path("none.json")}).code, 2);
}

TEST_F(Cli, FitThenConvert) {
  const auto ratings = simulated_ratings(60, 5, 9);
  ASSERT_EQ(run_cli({"fit", "--ratings", ratings, "--out", path("fit.json"), "--no-se"}).code, 0);
  ASSERT_EQ(run_cli({"convert", "--fit", path("fit.json"), "--ratings", ratings, "--out", path("f.csv")}).code, 0);
  const auto text = read("f.csv");
  const auto fz = parse_fuzzy_csv(text);
  EXPECT_EQ(fz.entries.size(), 300u);
  EXPECT_EQ(lines(text).size(), 301u);
  for (const auto& e : fz.entries) {
    EXPECT_GT(e.tfn.omega, 0.0);
    EXPECT_LE(e.tfn.omega, 1.0);
    EXPECT_GE(e.y, 1);
  }
  EXPECT_EQ(format_fuzzy_csv(fz), text);
}

TEST_F(Cli, SimulateDeskDesign) {
  const auto design = write("design.json", R"({"I":[50,150],"J":[10],"pi":[0,0.5],"B":50})");
  const auto a = run_cli({"simulate", "--design", design, "--out", path("a.csv")});
  ASSERT_EQ(a.code, 0) << a.err;
  ASSERT_EQ(run_cli({"simulate", "--design", design, "--out", path("b.csv")}).code, 0);
  EXPECT_EQ(read("a.csv"), read("b.csv"));
  const auto res = lines(read("a.csv"));
  ASSERT_EQ(res.size(), 5u);
  auto k_of = [&](std::size_t row) {
    std::vector<std::string> cells;
    std::istringstream in(res[row]);
    for (std::string c; std::getline(in, c, ',');) cells.push_back(c);
    return std::stod(cells[9]);
  };
  EXPECT_GT(k_of(2), k_of(1));
  EXPECT_GT(k_of(4), k_of(3));
  EXPECT_NE(a.out.find("Recovery accuracy"), std::string::npos);
}

TEST_F(Cli, SimulateErrors) {
  const auto r = run_cli({"simulate", "--design", write("d.json", R"({"B":0})")});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("B must be >= 1"), std::string::npos);
  EXPECT_EQ(run_cli({"simulate", "--design", path("missing.json")}).code, 2);
}

TEST_F(Cli, SimulateSeedOverridesAndThreads) {
  const auto design = write("d.json", R"({"I":[30],"J":[5],"pi":[0.25],"B":3})");
  const auto a = run_cli({"simulate", "--design", design, "--seed", "11", "--threads", "1"});
  const auto b = run_cli({"simulate", "--design", design, "--seed", "11", "--threads", "4"});
  const auto c = run_cli({"simulate", "--design", design, "--seed", "12"});
  EXPECT_EQ(a.out, b.out);
  EXPECT_NE(a.out, c.out);
}

TEST_F(Cli, UsageErrors) {
  EXPECT_EQ(run_cli({}).code, 1);
  EXPECT_EQ(run_cli({"frobnicate"}).code, 1);
  EXPECT_EQ(run_cli({"fit", "--ratings", "x.csv"}).code, 1);
  EXPECT_EQ(run_cli({"--help"}).code, 0);
}
