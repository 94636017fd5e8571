#pragma once

// Command-line front end. Exit codes: 0 success, 1 domain or validation
// error, 2 I/O error.

#include <algorithm>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "firtree/artifact.hpp"
#include "firtree/error.hpp"
#include "firtree/estimation.hpp"
#include "firtree/fuzzy.hpp"
#include "firtree/ratings.hpp"
#include "firtree/sgr.hpp"
#include "firtree/tree.hpp"

namespace firtree::cli {

constexpr int kExitOk = 0;
constexpr int kExitDomain = 1;
constexpr int kExitIo = 2;
constexpr std::uint64_t kDefaultSeed = 20240901;

struct TreeSource {
  std::string preset;
  std::string path;

  bool given() const { return !preset.empty() || !path.empty(); }

  ResponseTree load(bool check = true) const {
    if (!preset.empty() && !path.empty()) throw DomainError("use either --preset or --tree, not both");
    if (!path.empty()) return parse_tree_spec(detail::read_text_file(path), check);
    return preset_tree(preset.empty() ? "fig1-5cat" : preset);
  }
};

inline void add_tree_options(CLI::App* cmd, TreeSource& src) {
  cmd->add_option("--preset", src.preset, "Built-in tree (fig1-5cat | fig2-6cat)");
  cmd->add_option("--tree", src.path, "Tree spec JSON file");
}

inline int cmd_validate_tree(const TreeSource& src, std::ostream& out) {
  const ResponseTree tree = src.load(false);
  const auto report = validate_tree(tree);
  out << report.to_string() << "\n";
  return report.valid ? kExitOk : kExitDomain;
}

struct FitArgs {
  TreeSource tree;
  std::string ratings;
  std::string output;
  std::string model = "common";
  std::string items;
  std::string cov = "scalar";
  double tol = 1e-5;
  int max_iter = 500;
  unsigned threads = 1;
  bool no_se = false;
};

inline ModelSpec model_from_flags(ResponseTree tree, const std::string& model, const std::string& items,
                                  const std::string& cov) {
  auto design = [](const std::string& s, const char* flag) {
    if (s == "common") return true;
    if (s == "pernode") return false;
    throw DomainError(std::string(flag) + " must be common or pernode");
  };
  const bool common_traits = design(model, "--model");
  const bool common_items = design(items.empty() ? model : items, "--items");
  CovarianceStructure c = CovarianceStructure::ScalarVariance;
  if (cov == "diag")
    c = CovarianceStructure::Diagonal;
  else if (cov == "unstructured")
    c = CovarianceStructure::Unstructured;
  else if (cov != "scalar")
    throw DomainError("--cov must be scalar, diag or unstructured");
  return ModelSpec(std::move(tree), common_traits ? TraitDesign::Common : TraitDesign::PerNode,
                   common_items ? ItemDesign::Common : ItemDesign::PerNode, c);
}

inline int cmd_fit(const FitArgs& a, std::ostream& out, std::ostream& err) {
  ResponseTree tree = a.tree.load();
  const auto data = parse_ratings_csv(detail::read_text_file(a.ratings), tree.categories());
  const auto spec = model_from_flags(std::move(tree), a.model, a.items, a.cov);
  FitOptions opt;
  opt.tol = a.tol;
  opt.max_iter = a.max_iter;
  opt.threads = a.threads;
  opt.compute_standard_errors = !a.no_se;
  const auto result = fit(data, spec, opt);
  detail::write_text_file(a.output, serialize_fit(result));
  for (const auto& w : result.warnings) err << "warning: " << w << "\n";
  out << "loglik " << format_real(result.log_marginal_lik) << "\n"
      << "iterations " << result.iterations << "\n"
      << "converged " << (result.converged ? "true" : "false") << "\n";
  return kExitOk;
}

struct ConvertArgs {
  TreeSource tree;
  std::string fit;
  std::string ratings;
  std::string output;
  unsigned threads = 1;
};

inline int cmd_convert(const ConvertArgs& a, std::ostream& out) {
  const FitResult fitted = parse_fit(detail::read_text_file(a.fit));
  const ResponseTree tree = a.tree.given() ? a.tree.load() : fitted.spec.tree;
  std::optional<RatingMatrix> ratings;
  if (!a.ratings.empty()) ratings = parse_ratings_csv(detail::read_text_file(a.ratings), tree.categories());
  const auto fz = convert_all(fitted, tree, ratings ? &*ratings : nullptr, a.threads);
  const auto text = format_fuzzy_csv(fz);
  if (a.output.empty())
    out << text;
  else
    detail::write_text_file(a.output, text);
  return kExitOk;
}

struct SimulateArgs {
  std::string design;
  std::string output;
  std::optional<std::uint64_t> seed;
  unsigned threads = 1;
};

inline int cmd_simulate(const SimulateArgs& a, std::ostream& out) {
  SimDesign design = parse_design(detail::read_text_file(a.design));
  if (a.seed) design.seed = *a.seed;
  design.config.threads = a.threads;
  const auto res = run_study(design);
  const auto csv = format_results_csv(res);
  if (a.output.empty())
    out << csv;
  else
    detail::write_text_file(a.output, csv);
  out << format_results_table(res);
  return kExitOk;
}

struct EvalArgs {
  double c = 0.0, l = 0.0, r = 0.0, omega = 1.0;
  std::optional<double> y;
  bool grid = false;
  std::size_t categories = 5;
  std::size_t points = kDefaultGridPoints;
};

inline int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const Tfn4 f{a.c, a.l, a.r, a.omega};
  validate_tfn4(f);
  if (a.y) {
    out << format_real(membership(f, *a.y)) << "\n";
    return kExitOk;
  }
  if (!a.grid) throw DomainError("eval needs --y or --grid");
  auto grid = membership_grid(a.categories, a.points);
  // The mode is always a grid point so the peak is visible in plots.
  if (std::find(grid.begin(), grid.end(), f.c) == grid.end()) {
    grid.push_back(f.c);
    std::sort(grid.begin(), grid.end());
  }
  out << "y,membership\n";
  for (double y : grid) out << format_real(y) << ',' << format_real(membership(f, y)) << "\n";
  return kExitOk;
}

// Entry point shared by the binary and the tests.
inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"firtree: IRTree fitting and fuzzy conversion of rating data", "firtree"};
  app.require_subcommand(1);
  std::uint64_t seed = kDefaultSeed;

  TreeSource validate_src;
  auto* validate = app.add_subcommand("validate-tree", "Check a response tree");
  add_tree_options(validate, validate_src);

  FitArgs fit_args;
  auto* fitcmd = app.add_subcommand("fit", "Fit an IRTree by Laplace marginal maximum likelihood");
  add_tree_options(fitcmd, fit_args.tree);
  fitcmd->add_option("--ratings", fit_args.ratings, "Ratings CSV (I rows x J columns)")->required();
  fitcmd->add_option("--out,-o", fit_args.output, "Fit artifact JSON to write")->required();
  fitcmd->add_option("--model", fit_args.model, "Trait design: common | pernode");
  fitcmd->add_option("--items", fit_args.items, "Item design: common | pernode (defaults to --model)");
  fitcmd->add_option("--cov", fit_args.cov, "Trait covariance: scalar | diag | unstructured");
  fitcmd->add_option("--tol", fit_args.tol, "Projected gradient tolerance");
  fitcmd->add_option("--max-iter", fit_args.max_iter, "Outer iteration limit");
  fitcmd->add_option("--threads", fit_args.threads, "Worker threads (0 = all cores)");
  fitcmd->add_flag("--no-se", fit_args.no_se, "Skip standard errors");
  fitcmd->add_option("--seed", seed, "Accepted for interface uniformity; fitting is deterministic");

  ConvertArgs conv_args;
  auto* convcmd = app.add_subcommand("convert", "Convert a fit into triangular fuzzy numbers");
  add_tree_options(convcmd, conv_args.tree);
  convcmd->add_option("--fit", conv_args.fit, "Fit artifact JSON")->required();
  convcmd->add_option("--ratings", conv_args.ratings, "Original ratings CSV for the y column");
  convcmd->add_option("--out,-o", conv_args.output, "Fuzzy CSV to write (stdout if omitted)");
  convcmd->add_option("--threads", conv_args.threads, "Worker threads (0 = all cores)");

  SimulateArgs sim_args;
  std::uint64_t sim_seed = 0;
  auto* simcmd = app.add_subcommand("simulate", "Run the faking simulation study");
  simcmd->add_option("--design", sim_args.design, "Design JSON")->required();
  simcmd->add_option("--out,-o", sim_args.output, "Results CSV to write");
  auto* seed_opt = simcmd->add_option("--seed", sim_seed, "Master seed (overrides the design file)");
  simcmd->add_option("--threads", sim_args.threads, "Worker threads (0 = all cores)");

  EvalArgs eval_args;
  double eval_y = 0.0;
  auto* evalcmd = app.add_subcommand("eval", "Evaluate a four-parameter triangular membership function");
  evalcmd->add_option("--c", eval_args.c, "Mode")->required();
  evalcmd->add_option("--l", eval_args.l, "Left endpoint")->required();
  evalcmd->add_option("--r", eval_args.r, "Right endpoint")->required();
  evalcmd->add_option("--omega", eval_args.omega, "Intensification");
  auto* y_opt = evalcmd->add_option("--y", eval_y, "Point to evaluate");
  evalcmd->add_flag("--grid", eval_args.grid, "Emit a (y, membership) grid over [1, M]");
  evalcmd->add_option("--M", eval_args.categories, "Categories for --grid");
  evalcmd->add_option("--points", eval_args.points, "Grid points for --grid");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(std::move(reversed));
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitDomain;
  }

  try {
    if (*validate) return cmd_validate_tree(validate_src, out);
    if (*fitcmd) return cmd_fit(fit_args, out, err);
    if (*convcmd) return cmd_convert(conv_args, out);
    if (*simcmd) {
      if (*seed_opt) sim_args.seed = sim_seed;
      return cmd_simulate(sim_args, out);
    }
    if (*evalcmd) {
      if (*y_opt) eval_args.y = eval_y;
      return cmd_eval(eval_args, out);
    }
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitDomain;
  }
  return kExitDomain;
}

}  // namespace firtree::cli
