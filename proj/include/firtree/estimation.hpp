#pragma once

// Marginal maximum likelihood for IRTree models. Ratings are expanded to
// binary pseudo-observations, the Gaussian rater traits are integrated out
// with a per-rater Laplace approximation, and the fixed effects plus the
// Cholesky-parameterized trait covariance are maximized by box-constrained
// BFGS using the exact gradient of the Laplace objective.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "firtree/error.hpp"
#include "firtree/optimizer.hpp"
#include "firtree/parallel.hpp"
#include "firtree/ratings.hpp"
#include "firtree/tree.hpp"

namespace firtree {

enum class TraitDesign { Common, PerNode };
enum class ItemDesign { Common, PerNode };
enum class CovarianceStructure { ScalarVariance, Diagonal, Unstructured };

struct ModelSpec {
  ResponseTree tree;
  TraitDesign trait_design = TraitDesign::Common;
  ItemDesign item_design = ItemDesign::Common;
  CovarianceStructure covariance = CovarianceStructure::ScalarVariance;

  ModelSpec() = default;
  ModelSpec(ResponseTree t, TraitDesign traits = TraitDesign::Common, ItemDesign items = ItemDesign::Common,
            CovarianceStructure cov = CovarianceStructure::ScalarVariance)
      : tree(std::move(t)), trait_design(traits), item_design(items), covariance(cov) {
    // A single shared trait has exactly one variance.
    if (trait_design == TraitDesign::Common) covariance = CovarianceStructure::ScalarVariance;
  }

  std::size_t trait_dim() const noexcept { return trait_design == TraitDesign::Common ? 1 : tree.nodes(); }
  std::size_t item_columns() const noexcept { return item_design == ItemDesign::Common ? 1 : tree.nodes(); }
  std::size_t trait_index(std::size_t node) const noexcept {
    return trait_design == TraitDesign::Common ? 0 : node;
  }
  std::size_t item_column(std::size_t node) const noexcept {
    return item_design == ItemDesign::Common ? 0 : node;
  }
  std::size_t covariance_params() const noexcept {
    const std::size_t q = trait_dim();
    switch (covariance) {
      case CovarianceStructure::ScalarVariance: return 1;
      case CovarianceStructure::Diagonal: return q;
      case CovarianceStructure::Unstructured: return q * (q + 1) / 2;
    }
    return 1;
  }
};

inline const char* to_string(TraitDesign d) { return d == TraitDesign::Common ? "common" : "pernode"; }
inline const char* to_string(ItemDesign d) { return d == ItemDesign::Common ? "common" : "pernode"; }
inline const char* to_string(CovarianceStructure c) {
  switch (c) {
    case CovarianceStructure::ScalarVariance: return "scalar";
    case CovarianceStructure::Diagonal: return "diag";
    case CovarianceStructure::Unstructured: return "unstructured";
  }
  return "scalar";
}

struct PseudoObservation {
  std::uint32_t rater = 0;
  std::uint32_t item = 0;
  std::uint32_t node = 0;
  std::uint8_t z = 0;

  friend bool operator==(const PseudoObservation&, const PseudoObservation&) = default;
};

// One record per (rater, item, node) on the path of the observed category,
// rater-major then item then node.
inline std::vector<PseudoObservation> expand_to_pseudo_data(const RatingMatrix& data, const ResponseTree& tree) {
  if (data.categories() > tree.categories())
    throw DomainError("ratings use " + std::to_string(data.categories()) + " categories but the tree has " +
                      std::to_string(tree.categories()));
  std::vector<PseudoObservation> out;
  out.reserve(data.raters() * data.items() * tree.nodes());
  for (std::size_t i = 0; i < data.raters(); ++i) {
    for (std::size_t j = 0; j < data.items(); ++j) {
      const int y = data(i, j);
      if (y < 1 || static_cast<std::size_t>(y) > tree.categories())
        throw DomainError("category " + std::to_string(y) + " out of range at row " + std::to_string(i + 1) +
                          ", column " + std::to_string(j + 1));
      const auto row = tree.row(static_cast<std::size_t>(y - 1));
      for (std::size_t n = 0; n < row.size(); ++n) {
        if (row[n] == Branch::NA) continue;
        out.push_back({static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j), static_cast<std::uint32_t>(n),
                       static_cast<std::uint8_t>(row[n] == Branch::One ? 1 : 0)});
      }
    }
  }
  return out;
}

struct JointLogLik {
  double value = 0.0;
  Eigen::VectorXd gradient;  // d/d eta
  Eigen::MatrixXd hessian;   // d2/d eta2, negative definite
};

struct InnerOptions {
  double tol = 1e-8;
  int max_iter = 100;
  // Fraction of the Newton step taken each iteration.
  double step_scale = 1.0;
};

struct FitOptions {
  int max_iter = 500;
  double tol = 1e-5;
  // Optional starting parameter vector in the packed layout (see FitResult::theta).
  std::optional<Eigen::VectorXd> start;
  unsigned threads = 1;
  bool compute_standard_errors = true;
  InnerOptions inner;
};

struct FitResult {
  ModelSpec spec;
  std::string tree_digest;
  Eigen::MatrixXd alpha_hat;       // J x K, K = 1 (common) or N (per-node)
  Eigen::MatrixXd sigma_hat;       // q x q
  Eigen::MatrixXd sigma_cholesky;  // lower triangular
  Eigen::MatrixXd eta_hat;         // I x N posterior modes
  Eigen::MatrixXd se_alpha;        // J x K; NaN marks an unavailable entry
  Eigen::VectorXd theta;           // packed optimizer parameters
  double log_marginal_lik = 0.0;
  bool converged = false;
  int iterations = 0;
  std::vector<std::string> warnings;
};

namespace detail {

// Lower Cholesky factor from packed covariance parameters.
inline Eigen::MatrixXd cholesky_from_params(const ModelSpec& spec, std::span<const double> phi) {
  const auto q = static_cast<Eigen::Index>(spec.trait_dim());
  Eigen::MatrixXd chol = Eigen::MatrixXd::Zero(q, q);
  switch (spec.covariance) {
    case CovarianceStructure::ScalarVariance:
      for (Eigen::Index k = 0; k < q; ++k) chol(k, k) = std::exp(phi[0]);
      break;
    case CovarianceStructure::Diagonal:
      for (Eigen::Index k = 0; k < q; ++k) chol(k, k) = std::exp(phi[static_cast<std::size_t>(k)]);
      break;
    case CovarianceStructure::Unstructured: {
      std::size_t p = 0;
      for (Eigen::Index b = 0; b < q; ++b)
        for (Eigen::Index a = b; a < q; ++a) chol(a, b) = a == b ? std::exp(phi[p++]) : phi[p++];
      break;
    }
  }
  return chol;
}

// d L / d phi_k for every covariance parameter.
inline std::vector<Eigen::MatrixXd> cholesky_derivatives(const ModelSpec& spec, const Eigen::MatrixXd& chol) {
  const Eigen::Index q = chol.rows();
  std::vector<Eigen::MatrixXd> out;
  switch (spec.covariance) {
    case CovarianceStructure::ScalarVariance:
      out.push_back(chol);
      break;
    case CovarianceStructure::Diagonal:
      for (Eigen::Index k = 0; k < q; ++k) {
        Eigen::MatrixXd dl = Eigen::MatrixXd::Zero(q, q);
        dl(k, k) = chol(k, k);
        out.push_back(std::move(dl));
      }
      break;
    case CovarianceStructure::Unstructured:
      for (Eigen::Index b = 0; b < q; ++b)
        for (Eigen::Index a = b; a < q; ++a) {
          Eigen::MatrixXd dl = Eigen::MatrixXd::Zero(q, q);
          dl(a, b) = a == b ? chol(a, a) : 1.0;
          out.push_back(std::move(dl));
        }
      break;
  }
  return out;
}

// Fixed effects and covariance in usable form for one parameter value.
struct ModelParameters {
  Eigen::MatrixXd alpha;      // J x K
  Eigen::MatrixXd chol;       // q x q lower
  Eigen::MatrixXd precision;  // Sigma^{-1}
  double log_det_sigma = 0.0;

  static ModelParameters from_covariance(Eigen::MatrixXd alpha, const Eigen::MatrixXd& sigma) {
    Eigen::LLT<Eigen::MatrixXd> llt(sigma);
    if (llt.info() != Eigen::Success || sigma.rows() == 0) throw EstimationError("covariance matrix is singular");
    Eigen::MatrixXd chol = llt.matrixL();
    return from_cholesky(std::move(alpha), chol);
  }

  static ModelParameters from_cholesky(Eigen::MatrixXd alpha, const Eigen::MatrixXd& chol) {
    ModelParameters p;
    p.alpha = std::move(alpha);
    p.chol = chol;
    const auto q = chol.rows();
    for (Eigen::Index k = 0; k < q; ++k) {
      if (!(chol(k, k) > 0.0) || !std::isfinite(chol(k, k))) throw EstimationError("covariance matrix is singular");
      p.log_det_sigma += 2.0 * std::log(chol(k, k));
    }
    const Eigen::MatrixXd linv =
        chol.triangularView<Eigen::Lower>().solve(Eigen::MatrixXd::Identity(q, q));
    p.precision = linv.transpose() * linv;
    return p;
  }
};

// Records of a single rater; item/node indices only.
struct RaterRecord {
  std::uint32_t item;
  std::uint32_t node;
  std::uint8_t z;
};

inline JointLogLik joint_eval(const ModelSpec& spec, const ModelParameters& par, const Eigen::VectorXd& eta,
                              std::span<const RaterRecord> records, bool derivatives) {
  const auto q = static_cast<Eigen::Index>(spec.trait_dim());
  JointLogLik out;
  if (derivatives) {
    out.gradient = Eigen::VectorXd::Zero(q);
    out.hessian = Eigen::MatrixXd::Zero(q, q);
  }
  double ll = 0.0;
  for (const auto& r : records) {
    const auto k = static_cast<Eigen::Index>(spec.trait_index(r.node));
    const double x = eta[k] + par.alpha(r.item, static_cast<Eigen::Index>(spec.item_column(r.node)));
    ll += (r.z ? x : 0.0) - log1p_exp(x);
    if (derivatives) {
      const double p = logistic(x);
      out.gradient[k] += r.z - p;
      out.hessian(k, k) -= p * (1.0 - p);
    }
  }
  const Eigen::VectorXd p_eta = par.precision * eta;
  const double log2pi = std::log(2.0 * std::numbers::pi);
  out.value = ll - 0.5 * eta.dot(p_eta) - 0.5 * par.log_det_sigma - 0.5 * static_cast<double>(q) * log2pi;
  if (derivatives) {
    out.gradient -= p_eta;
    out.hessian -= par.precision;
  }
  return out;
}

struct RaterLaplace {
  double value = 0.0;
  int iterations = 0;
  Eigen::VectorXd alpha_grad;  // indexed like the packed alpha block
  Eigen::VectorXd cov_grad;
};

// The rater's problem in whitened coordinates eta = L u, where the prior is
// standard normal whatever the conditioning of Sigma. `value` omits the
// constant -0.5 log det Sigma - q/2 log 2 pi.
struct WhitenedEval {
  double value = 0.0;
  Eigen::VectorXd eta;
  Eigen::VectorXd score;   // d ll / d eta
  Eigen::VectorXd weight;  // -d2 ll / d eta2, diagonal
  Eigen::VectorXd gradient;  // d value / d u
  Eigen::MatrixXd b;         // -d2 value / d u2 = I + L' W L
};

inline WhitenedEval whitened_eval(const ModelSpec& spec, const ModelParameters& par, const Eigen::VectorXd& u,
                                  std::span<const RaterRecord> records, bool derivatives) {
  const auto q = u.size();
  WhitenedEval out;
  out.eta = par.chol.triangularView<Eigen::Lower>() * u;
  if (derivatives) {
    out.score = Eigen::VectorXd::Zero(q);
    out.weight = Eigen::VectorXd::Zero(q);
  }
  double ll = 0.0;
  for (const auto& r : records) {
    const auto k = static_cast<Eigen::Index>(spec.trait_index(r.node));
    const double x = out.eta[k] + par.alpha(r.item, static_cast<Eigen::Index>(spec.item_column(r.node)));
    ll += (r.z ? x : 0.0) - log1p_exp(x);
    if (derivatives) {
      const double p = logistic(x);
      out.score[k] += r.z - p;
      out.weight[k] += p * (1.0 - p);
    }
  }
  out.value = ll - 0.5 * u.squaredNorm();
  if (derivatives) {
    out.gradient = par.chol.transpose() * out.score - u;
    out.b = Eigen::MatrixXd::Identity(q, q) + par.chol.transpose() * out.weight.asDiagonal() * par.chol;
  }
  return out;
}

// Newton ascent in whitened coordinates; `u` holds the start on entry and
// the mode on exit. Returns the iteration count.
inline int solve_whitened(const ModelSpec& spec, const ModelParameters& par, std::span<const RaterRecord> records,
                          Eigen::VectorXd& u, const InnerOptions& opt, std::size_t rater, WhitenedEval& at_mode) {
  constexpr double kMaxStep = 5.0;
  for (int it = 0; it <= opt.max_iter; ++it) {
    at_mode = whitened_eval(spec, par, u, records, true);
    const double gnorm = at_mode.gradient.norm();
    Eigen::LLT<Eigen::MatrixXd> llt(at_mode.b);
    if (llt.info() != Eigen::Success)
      throw EstimationError("inner Hessian is not negative definite for rater " + std::to_string(rater + 1));
    Eigen::VectorXd step = llt.solve(at_mode.gradient);
    const bool at_floor = step.norm() <= 1e-14 * (1.0 + u.norm());
    if (gnorm < opt.tol || at_floor) {
      // One polishing step; Newton is quadratic here so the residual becomes negligible.
      if (gnorm > 0.0) {
        Eigen::VectorXd trial = u + step;
        WhitenedEval polished = whitened_eval(spec, par, trial, records, true);
        if (polished.value >= at_mode.value - 1e-13 * (1.0 + std::abs(at_mode.value)) &&
            polished.gradient.norm() <= gnorm) {
          u = std::move(trial);
          at_mode = std::move(polished);
        }
      }
      return it;
    }
    if (it == opt.max_iter) break;
    step *= opt.step_scale;
    const double snorm = step.norm();
    const double cap = std::max(kMaxStep, u.norm());
    if (snorm > cap) step *= cap / snorm;
    double t = 1.0;
    for (int half = 0; half < 60; ++half) {
      const Eigen::VectorXd trial = u + t * step;
      // Slack for rounding: near the mode the true gain is below double resolution.
      if (whitened_eval(spec, par, trial, records, false).value >=
          at_mode.value - 1e-12 * (1.0 + std::abs(at_mode.value)))
        break;
      t *= 0.5;
    }
    u += t * step;
  }
  throw EstimationError("inner Newton did not converge for rater " + std::to_string(rater + 1) + " after " +
                        std::to_string(opt.max_iter) + " iterations");
}

// Warm start for the whitened solve: the previous mode mapped through the
// current factor, unless the prior mode is already better.
inline Eigen::VectorXd warm_start(const ModelSpec& spec, const ModelParameters& par, const Eigen::VectorXd& eta,
                                  std::span<const RaterRecord> records) {
  Eigen::VectorXd u = par.chol.triangularView<Eigen::Lower>().solve(eta);
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(eta.size());
  if (!u.allFinite() || whitened_eval(spec, par, u, records, false).value < whitened_eval(spec, par, zero, records, false).value)
    return zero;
  return u;
}

// Posterior mode of one rater; `eta` holds the start on entry and the mode
// on exit, `at_mode` the joint log-likelihood there.
inline int solve_mode(const ModelSpec& spec, const ModelParameters& par, std::span<const RaterRecord> records,
                      Eigen::VectorXd& eta, const InnerOptions& opt, std::size_t rater, JointLogLik& at_mode) {
  Eigen::VectorXd u = warm_start(spec, par, eta, records);
  WhitenedEval w;
  const int it = solve_whitened(spec, par, records, u, opt, rater, w);
  eta = w.eta;
  at_mode = joint_eval(spec, par, eta, records, true);
  return it;
}

// Laplace contribution of one rater and, optionally, its exact gradient
// with respect to the packed alpha block and covariance parameters.
// `dchol` holds d L / d phi for each covariance parameter.
inline RaterLaplace rater_laplace(const ModelSpec& spec, const ModelParameters& par,
                                  const std::vector<Eigen::MatrixXd>& dchol, std::span<const RaterRecord> records,
                                  Eigen::VectorXd& eta, const InnerOptions& opt, std::size_t rater, bool gradient) {
  const auto q = static_cast<Eigen::Index>(spec.trait_dim());
  Eigen::VectorXd u = warm_start(spec, par, eta, records);
  WhitenedEval at;
  RaterLaplace out;
  out.iterations = solve_whitened(spec, par, records, u, opt, rater, at);
  eta = at.eta;

  Eigen::LLT<Eigen::MatrixXd> llt(at.b);
  const Eigen::MatrixXd lb = llt.matrixL();
  double log_det_b = 0.0;
  for (Eigen::Index k = 0; k < q; ++k) log_det_b += 2.0 * std::log(lb(k, k));
  out.value = at.value - 0.5 * log_det_b;
  if (!gradient) return out;

  const Eigen::MatrixXd& l = par.chol;
  const Eigen::MatrixXd b_inv = llt.solve(Eigen::MatrixXd::Identity(q, q));
  const Eigen::MatrixXd l_binv = l * b_inv;
  const Eigen::MatrixXd a_inv = l_binv * l.transpose();  // (-d2 joint / d eta2)^{-1}
  const auto kcols = static_cast<Eigen::Index>(spec.item_columns());
  out.alpha_grad = Eigen::VectorXd::Zero(par.alpha.rows() * kcols);

  // c = sum_r w'_r h_r e_{k_r}, with h_r the diagonal of A^{-1} at the record's trait.
  Eigen::VectorXd c = Eigen::VectorXd::Zero(q);
  std::vector<double> p_cache(records.size());
  for (std::size_t idx = 0; idx < records.size(); ++idx) {
    const auto& r = records[idx];
    const auto k = static_cast<Eigen::Index>(spec.trait_index(r.node));
    const double x = eta[k] + par.alpha(r.item, static_cast<Eigen::Index>(spec.item_column(r.node)));
    const double p = logistic(x);
    p_cache[idx] = p;
    c[k] += p * (1.0 - p) * (1.0 - 2.0 * p) * a_inv(k, k);
  }
  const Eigen::VectorXd v = a_inv * c;
  for (std::size_t idx = 0; idx < records.size(); ++idx) {
    const auto& r = records[idx];
    const auto k = static_cast<Eigen::Index>(spec.trait_index(r.node));
    const double p = p_cache[idx];
    const double w = p * (1.0 - p);
    const double dw = w * (1.0 - 2.0 * p);
    const auto slot = static_cast<Eigen::Index>(r.item) * kcols + static_cast<Eigen::Index>(spec.item_column(r.node));
    out.alpha_grad[slot] += (r.z - p) - 0.5 * dw * a_inv(k, k) + 0.5 * w * v[k];
  }

  // d value / d L: direct term, log-determinant term at fixed weights, the
  // weights' dependence on eta = L u, and the shift of the mode.
  const Eigen::VectorXd m = b_inv * (l.transpose() * c);
  Eigen::MatrixXd d_l = at.score * u.transpose() - at.weight.asDiagonal() * l_binv - 0.5 * c * u.transpose() -
                        0.5 * at.score * m.transpose() + 0.5 * (v.array() * at.weight.array()).matrix() * u.transpose();
  out.cov_grad = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dchol.size()));
  for (std::size_t f = 0; f < dchol.size(); ++f)
    out.cov_grad[static_cast<Eigen::Index>(f)] = (dchol[f].array() * d_l.array()).sum();
  return out;
}

}  // namespace detail

// Joint log-likelihood of one rater's pseudo-observations plus the Gaussian
// log-density of `eta`, with its exact gradient and Hessian in `eta`.
// `alpha` is J x K; `sigma` is the q x q trait covariance.
inline JointLogLik joint_loglik(const ModelSpec& spec, const Eigen::MatrixXd& alpha, const Eigen::MatrixXd& sigma,
                                const Eigen::VectorXd& eta, std::span<const PseudoObservation> records) {
  const auto q = static_cast<Eigen::Index>(spec.trait_dim());
  if (eta.size() != q || sigma.rows() != q || sigma.cols() != q)
    throw DimensionError("eta and sigma must match the trait dimension " + std::to_string(q));
  if (alpha.cols() != static_cast<Eigen::Index>(spec.item_columns()))
    throw DimensionError("alpha must have " + std::to_string(spec.item_columns()) + " columns");
  const auto par = detail::ModelParameters::from_covariance(alpha, sigma);
  std::vector<detail::RaterRecord> recs;
  recs.reserve(records.size());
  for (const auto& r : records) {
    if (static_cast<Eigen::Index>(r.item) >= alpha.rows() || r.node >= spec.tree.nodes())
      throw DimensionError("pseudo-observation indexes outside alpha or the tree");
    recs.push_back({r.item, r.node, r.z});
  }
  return detail::joint_eval(spec, par, eta, recs, true);
}

// The Laplace-approximated log marginal likelihood as a function of the
// packed parameter vector, for a fixed dataset. Owns per-rater warm starts.
class LaplaceObjective {
 public:
  LaplaceObjective(ModelSpec spec, std::span<const PseudoObservation> records, std::size_t raters,
                   std::size_t items, InnerOptions inner = {}, unsigned threads = 1)
      : spec_(std::move(spec)), raters_(raters), items_(items), inner_(inner), threads_(threads) {
    offsets_.assign(raters_ + 1, 0);
    for (const auto& r : records) {
      if (r.rater >= raters_ || r.item >= items_ || r.node >= spec_.tree.nodes())
        throw DimensionError("pseudo-observation indexes outside the data dimensions");
      ++offsets_[r.rater + 1];
    }
    for (std::size_t i = 0; i < raters_; ++i) offsets_[i + 1] += offsets_[i];
    records_.resize(records.size());
    std::vector<std::size_t> fill(offsets_.begin(), offsets_.end() - 1);
    for (const auto& r : records) records_[fill[r.rater]++] = {r.item, r.node, r.z};
    modes_.assign(raters_, Eigen::VectorXd::Zero(static_cast<Eigen::Index>(spec_.trait_dim())));
  }

  const ModelSpec& spec() const noexcept { return spec_; }
  std::size_t raters() const noexcept { return raters_; }
  std::size_t items() const noexcept { return items_; }
  std::size_t alpha_params() const noexcept { return items_ * spec_.item_columns(); }
  std::size_t param_count() const noexcept { return alpha_params() + spec_.covariance_params(); }

  std::span<const detail::RaterRecord> rater_records(std::size_t i) const {
    return {records_.data() + offsets_[i], offsets_[i + 1] - offsets_[i]};
  }

  detail::ModelParameters unpack(const Eigen::VectorXd& theta) const {
    const auto kcols = static_cast<Eigen::Index>(spec_.item_columns());
    Eigen::MatrixXd alpha(static_cast<Eigen::Index>(items_), kcols);
    for (Eigen::Index j = 0; j < alpha.rows(); ++j)
      for (Eigen::Index c = 0; c < kcols; ++c) alpha(j, c) = theta[j * kcols + c];
    const std::span<const double> phi(theta.data() + alpha_params(), spec_.covariance_params());
    return detail::ModelParameters::from_cholesky(std::move(alpha), detail::cholesky_from_params(spec_, phi));
  }

  // Log marginal likelihood; writes its gradient when `grad` is non-null.
  double evaluate(const Eigen::VectorXd& theta, Eigen::VectorXd* grad) {
    const auto par = unpack(theta);
    const auto dchol = detail::cholesky_derivatives(spec_, par.chol);
    std::vector<detail::RaterLaplace> parts(raters_);
    parallel_for(raters_, threads_, [&](std::size_t i) {
      parts[i] = detail::rater_laplace(spec_, par, dchol, rater_records(i), modes_[i], inner_, i, grad != nullptr);
    });
    std::vector<double> values(raters_);
    for (std::size_t i = 0; i < raters_; ++i) values[i] = parts[i].value;
    const double total = ordered_sum(values);
    if (grad) {
      grad->setZero(static_cast<Eigen::Index>(param_count()));
      for (std::size_t p = 0; p < param_count(); ++p) {
        for (std::size_t i = 0; i < raters_; ++i) {
          values[i] = p < alpha_params() ? parts[i].alpha_grad[static_cast<Eigen::Index>(p)]
                                         : parts[i].cov_grad[static_cast<Eigen::Index>(p - alpha_params())];
        }
        (*grad)[static_cast<Eigen::Index>(p)] = ordered_sum(values);
      }
    }
    return total;
  }

  const std::vector<Eigen::VectorXd>& modes() const noexcept { return modes_; }
  void reset_modes() {
    for (auto& m : modes_) m.setZero();
  }
  void set_inner_options(const InnerOptions& inner) { inner_ = inner; }

 private:
  ModelSpec spec_;
  std::size_t raters_;
  std::size_t items_;
  InnerOptions inner_;
  unsigned threads_;
  std::vector<std::size_t> offsets_;
  std::vector<detail::RaterRecord> records_;
  std::vector<Eigen::VectorXd> modes_;
};

// Sum over raters of the Laplace approximation to each rater's marginal
// log-likelihood. Rater count is inferred from the largest rater index.
inline double laplace_marginal_loglik(const ModelSpec& spec, const Eigen::MatrixXd& alpha,
                                      const Eigen::MatrixXd& sigma, std::span<const PseudoObservation> records,
                                      const InnerOptions& inner = {}) {
  std::size_t raters = 0;
  for (const auto& r : records) raters = std::max<std::size_t>(raters, r.rater + 1);
  if (alpha.cols() != static_cast<Eigen::Index>(spec.item_columns()))
    throw DimensionError("alpha must have " + std::to_string(spec.item_columns()) + " columns");
  const auto par = detail::ModelParameters::from_covariance(alpha, sigma);
  LaplaceObjective obj(spec, records, raters, static_cast<std::size_t>(alpha.rows()), inner);
  std::vector<double> values(raters);
  const std::vector<Eigen::MatrixXd> none;
  for (std::size_t i = 0; i < raters; ++i) {
    Eigen::VectorXd eta = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(spec.trait_dim()));
    values[i] = detail::rater_laplace(spec, par, none, obj.rater_records(i), eta, inner, i, false).value;
  }
  return ordered_sum(values);
}

namespace detail {

constexpr double kPredictorClamp = 15.0;
constexpr double kLogSdLower = -7.0;
constexpr double kLogSdUpper = 4.0;
constexpr double kOffDiagonalBound = 50.0;

inline void parameter_bounds(const LaplaceObjective& obj, Eigen::VectorXd& lower, Eigen::VectorXd& upper) {
  const auto n = static_cast<Eigen::Index>(obj.param_count());
  lower.resize(n);
  upper.resize(n);
  const auto na = static_cast<Eigen::Index>(obj.alpha_params());
  lower.head(na).setConstant(-kPredictorClamp);
  upper.head(na).setConstant(kPredictorClamp);
  const auto& spec = obj.spec();
  Eigen::Index p = na;
  if (spec.covariance == CovarianceStructure::Unstructured) {
    const auto q = static_cast<Eigen::Index>(spec.trait_dim());
    for (Eigen::Index b = 0; b < q; ++b)
      for (Eigen::Index a = b; a < q; ++a, ++p) {
        lower[p] = a == b ? kLogSdLower : -kOffDiagonalBound;
        upper[p] = a == b ? kLogSdUpper : kOffDiagonalBound;
      }
  } else {
    for (; p < n; ++p) {
      lower[p] = kLogSdLower;
      upper[p] = kLogSdUpper;
    }
  }
}

// Empirical logits per alpha parameter (clamped to +-3); identity covariance.
inline Eigen::VectorXd default_start(const LaplaceObjective& obj, std::span<const PseudoObservation> records) {
  const auto& spec = obj.spec();
  const auto kcols = spec.item_columns();
  std::vector<double> ones(obj.alpha_params(), 0.0), total(obj.alpha_params(), 0.0);
  for (const auto& r : records) {
    const std::size_t slot = r.item * kcols + spec.item_column(r.node);
    ones[slot] += r.z;
    total[slot] += 1.0;
  }
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(obj.param_count()));
  for (std::size_t s = 0; s < ones.size(); ++s) {
    if (total[s] == 0.0) continue;
    const double p = ones[s] / total[s];
    double logit = p <= 0.0 ? -3.0 : p >= 1.0 ? 3.0 : std::log(p / (1.0 - p));
    theta[static_cast<Eigen::Index>(s)] = std::clamp(logit, -3.0, 3.0);
  }
  return theta;
}

inline std::vector<std::string> separation_warnings(const ModelSpec& spec, std::span<const PseudoObservation> records,
                                                    std::size_t items) {
  std::vector<std::string> out;
  const std::size_t n = spec.tree.nodes();
  std::vector<std::size_t> node_ones(n, 0), node_total(n, 0);
  const std::size_t kcols = spec.item_columns();
  std::vector<std::size_t> par_ones(items * kcols, 0), par_total(items * kcols, 0);
  for (const auto& r : records) {
    node_ones[r.node] += r.z;
    ++node_total[r.node];
    const std::size_t slot = r.item * kcols + spec.item_column(r.node);
    par_ones[slot] += r.z;
    ++par_total[slot];
  }
  for (std::size_t k = 0; k < n; ++k) {
    if (node_total[k] > 0 && (node_ones[k] == 0 || node_ones[k] == node_total[k]))
      out.push_back("separation: node " + spec.tree.node_labels()[k] + " has all-" +
                    (node_ones[k] == 0 ? "0" : "1") + " pseudo-responses; linear predictors clamped to |15|");
  }
  std::size_t separated = 0;
  for (std::size_t s = 0; s < par_total.size(); ++s)
    if (par_total[s] > 0 && (par_ones[s] == 0 || par_ones[s] == par_total[s])) ++separated;
  if (separated > 0)
    out.push_back("separation: " + std::to_string(separated) +
                  " item parameter(s) see only all-0 or all-1 pseudo-responses; estimates clamped to |15|");
  return out;
}

// Packs FitResult estimates back into the optimizer layout.
inline Eigen::VectorXd pack_parameters(const ModelSpec& spec, const Eigen::MatrixXd& alpha,
                                       const Eigen::MatrixXd& chol) {
  const auto kcols = static_cast<Eigen::Index>(spec.item_columns());
  const Eigen::Index na = alpha.rows() * kcols;
  Eigen::VectorXd theta(na + static_cast<Eigen::Index>(spec.covariance_params()));
  for (Eigen::Index j = 0; j < alpha.rows(); ++j)
    for (Eigen::Index c = 0; c < kcols; ++c) theta[j * kcols + c] = alpha(j, c);
  Eigen::Index p = na;
  const auto q = chol.rows();
  switch (spec.covariance) {
    case CovarianceStructure::ScalarVariance: theta[p] = std::log(chol(0, 0)); break;
    case CovarianceStructure::Diagonal:
      for (Eigen::Index k = 0; k < q; ++k) theta[p++] = std::log(chol(k, k));
      break;
    case CovarianceStructure::Unstructured:
      for (Eigen::Index b = 0; b < q; ++b)
        for (Eigen::Index a = b; a < q; ++a) theta[p++] = a == b ? std::log(chol(a, a)) : chol(a, b);
      break;
  }
  return theta;
}

inline Eigen::MatrixXd expand_modes(const ModelSpec& spec, const std::vector<Eigen::VectorXd>& modes) {
  const auto n = static_cast<Eigen::Index>(spec.tree.nodes());
  Eigen::MatrixXd eta(static_cast<Eigen::Index>(modes.size()), n);
  for (std::size_t i = 0; i < modes.size(); ++i)
    for (Eigen::Index k = 0; k < n; ++k)
      eta(static_cast<Eigen::Index>(i), k) = modes[i][static_cast<Eigen::Index>(spec.trait_index(static_cast<std::size_t>(k)))];
  return eta;
}

// Central differences of the analytic gradient, relative step 1e-4.
inline Eigen::MatrixXd observed_information(LaplaceObjective& obj, const Eigen::VectorXd& theta) {
  constexpr double kRelStep = 1e-4;
  const auto n = theta.size();
  Eigen::MatrixXd hess(n, n);
  Eigen::VectorXd gp(n), gm(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const double h = kRelStep * std::max(1.0, std::abs(theta[k]));
    Eigen::VectorXd x = theta;
    x[k] = theta[k] + h;
    obj.evaluate(x, &gp);
    x[k] = theta[k] - h;
    obj.evaluate(x, &gm);
    hess.col(k) = (gp - gm) / (2.0 * h);
  }
  return -0.5 * (hess + hess.transpose());
}

}  // namespace detail

// Standard errors of the alpha block from the inverse observed information
// of the Laplace objective. Entries that cannot be computed are NaN and a
// warning is appended.
inline Eigen::MatrixXd standard_errors(const FitResult& fit, const RatingMatrix& data,
                                       std::vector<std::string>* warnings = nullptr, unsigned threads = 1) {
  const auto records = expand_to_pseudo_data(data, fit.spec.tree);
  LaplaceObjective obj(fit.spec, records, data.raters(), data.items(), {}, threads);
  const Eigen::MatrixXd info = detail::observed_information(obj, fit.theta);
  const auto kcols = static_cast<Eigen::Index>(fit.spec.item_columns());
  Eigen::MatrixXd se = Eigen::MatrixXd::Constant(static_cast<Eigen::Index>(data.items()), kcols,
                                                 std::numeric_limits<double>::quiet_NaN());
  Eigen::FullPivLU<Eigen::MatrixXd> lu(info);
  if (!lu.isInvertible()) {
    if (warnings) warnings->push_back("observed information is singular; standard errors unavailable");
    return se;
  }
  const Eigen::MatrixXd cov = lu.inverse();
  bool any_bad = false;
  for (Eigen::Index j = 0; j < se.rows(); ++j)
    for (Eigen::Index c = 0; c < kcols; ++c) {
      const double var = cov(j * kcols + c, j * kcols + c);
      if (var > 0.0 && std::isfinite(var))
        se(j, c) = std::sqrt(var);
      else
        any_bad = true;
    }
  if (any_bad && warnings) warnings->push_back("observed information is not positive definite; some standard errors unavailable");
  return se;
}

// Empirical-Bayes posterior modes at the fitted parameters, I x N.
inline Eigen::MatrixXd posterior_modes(const FitResult& fit, const RatingMatrix& data, const InnerOptions& inner = {}) {
  const auto records = expand_to_pseudo_data(data, fit.spec.tree);
  LaplaceObjective obj(fit.spec, records, data.raters(), data.items(), inner);
  const auto par = obj.unpack(fit.theta);
  std::vector<Eigen::VectorXd> modes(data.raters(), Eigen::VectorXd::Zero(static_cast<Eigen::Index>(fit.spec.trait_dim())));
  for (std::size_t i = 0; i < data.raters(); ++i) {
    JointLogLik at_mode;
    detail::solve_mode(fit.spec, par, obj.rater_records(i), modes[i], inner, i, at_mode);
  }
  return detail::expand_modes(fit.spec, modes);
}

inline FitResult fit(const RatingMatrix& data, const ModelSpec& spec, const FitOptions& options = {}) {
  const auto report = validate_tree(spec.tree);
  if (!report.valid) throw DomainError("invalid tree: " + report.problems.front());
  const auto records = expand_to_pseudo_data(data, spec.tree);

  LaplaceObjective obj(spec, records, data.raters(), data.items(), options.inner, options.threads);
  Eigen::VectorXd lower, upper;
  detail::parameter_bounds(obj, lower, upper);

  FitResult res;
  res.spec = obj.spec();
  res.tree_digest = tree_digest(spec.tree);
  res.warnings = detail::separation_warnings(res.spec, records, data.items());

  Eigen::VectorXd start = options.start ? *options.start : detail::default_start(obj, records);
  if (start.size() != static_cast<Eigen::Index>(obj.param_count()))
    throw DimensionError("start vector has " + std::to_string(start.size()) + " entries, expected " +
                         std::to_string(obj.param_count()));

  BoxBfgsOptions bfgs;
  bfgs.max_iter = options.max_iter;
  bfgs.gtol = options.tol;
  auto negated = [&](const Eigen::VectorXd& x, Eigen::VectorXd& g) {
    const double v = obj.evaluate(x, &g);
    g = -g;
    return -v;
  };
  const auto opt = minimize_box_bfgs(negated, start, lower, upper, bfgs);

  res.theta = opt.x;
  res.converged = opt.converged;
  res.iterations = opt.iterations;
  if (!opt.converged) res.warnings.push_back("outer optimizer did not converge: " + opt.message);

  // Final inner solves at the accepted parameters.
  res.log_marginal_lik = obj.evaluate(res.theta, nullptr);
  const auto par = obj.unpack(res.theta);
  res.alpha_hat = par.alpha;
  res.sigma_cholesky = par.chol;
  res.sigma_hat = par.chol * par.chol.transpose();
  res.eta_hat = detail::expand_modes(res.spec, obj.modes());

  const auto kcols = static_cast<Eigen::Index>(res.spec.item_columns());
  if (options.compute_standard_errors) {
    res.se_alpha = standard_errors(res, data, &res.warnings, options.threads);
  } else {
    res.se_alpha = Eigen::MatrixXd::Constant(static_cast<Eigen::Index>(data.items()), kcols,
                                             std::numeric_limits<double>::quiet_NaN());
  }
  return res;
}

}  // namespace firtree
