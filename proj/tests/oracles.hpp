#pragma once

// Independent reference computations used by the tests.

#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "firtree/tree.hpp"

namespace oracle {

// Gauss-Hermite rule for the weight exp(-x^2) via Golub-Welsch.
struct GaussHermite {
  std::vector<double> nodes, weights;

  explicit GaussHermite(int n) {
    Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(n, n);
    for (int k = 1; k < n; ++k) jac(k, k - 1) = jac(k - 1, k) = std::sqrt(k / 2.0);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(jac);
    for (int k = 0; k < n; ++k) {
      nodes.push_back(es.eigenvalues()[k]);
      const double v = es.eigenvectors()(0, k);
      weights.push_back(std::sqrt(std::numbers::pi) * v * v);
    }
  }
};

// log P(y_1..y_J | eta) for one rater under the common design, built from
// category_probabilities only.
inline double rater_loglik(const firtree::ResponseTree& tree, const std::vector<int>& y,
                           const std::vector<double>& alpha, double eta) {
  const std::size_t n = tree.nodes();
  double ll = 0.0;
  for (std::size_t j = 0; j < y.size(); ++j) {
    const auto p = firtree::category_probabilities(tree, firtree::PersonTraits{std::vector<double>(n, eta)},
                                                   firtree::ItemEasiness{std::vector<double>(n, alpha[j])});
    ll += std::log(p[static_cast<std::size_t>(y[j] - 1)]);
  }
  return ll;
}

struct ModeFit {
  double mode = 0.0;
  double value = 0.0;      // log integrand at the mode
  double curvature = 0.0;  // minus its second derivative there
};

// Mode of log P(y | eta) + log N(eta; 0, variance) by golden-section search
// (the function is concave), curvature by central differences.
inline ModeFit fit_mode(const firtree::ResponseTree& tree, const std::vector<int>& y, const std::vector<double>& alpha,
                        double variance) {
  auto f = [&](double eta) {
    return rater_loglik(tree, y, alpha, eta) - 0.5 * eta * eta / variance -
           0.5 * std::log(2.0 * std::numbers::pi * variance);
  };
  double a = -30.0 * std::sqrt(variance) - 20.0, b = -a;
  const double g = (std::sqrt(5.0) - 1.0) / 2.0;
  double c = b - g * (b - a), d = a + g * (b - a);
  double fc = f(c), fd = f(d);
  for (int it = 0; it < 200; ++it) {
    if (fc > fd) {
      b = d; d = c; fd = fc; c = b - g * (b - a); fc = f(c);
    } else {
      a = c; c = d; fc = fd; d = a + g * (b - a); fd = f(d);
    }
  }
  ModeFit out;
  out.mode = 0.5 * (a + b);
  out.value = f(out.mode);
  const double h = 1e-4 * std::max(1.0, std::sqrt(variance));
  out.curvature = -(f(out.mode + h) - 2.0 * out.value + f(out.mode - h)) / (h * h);
  return out;
}

// Adaptive Gauss-Hermite approximation of
// log \int P(y | eta) N(eta; 0, variance) d eta.
inline double adaptive_gh_marginal(const firtree::ResponseTree& tree, const std::vector<int>& y,
                                   const std::vector<double>& alpha, double variance, int points = 61) {
  auto log_integrand = [&](double eta) {
    return rater_loglik(tree, y, alpha, eta) - 0.5 * eta * eta / variance -
           0.5 * std::log(2.0 * std::numbers::pi * variance);
  };
  const ModeFit m = fit_mode(tree, y, alpha, variance);
  const double scale = 1.0 / std::sqrt(m.curvature);
  static const GaussHermite rule(points);
  double total = 0.0;
  for (std::size_t k = 0; k < rule.nodes.size(); ++k) {
    const double x = rule.nodes[k];
    const double eta = m.mode + std::sqrt(2.0) * scale * x;
    total += rule.weights[k] * std::exp(x * x + log_integrand(eta) - m.value);
  }
  return m.value + std::log(std::sqrt(2.0) * scale * total);
}

// Second-order (Laplace) approximation of the same integral.
inline double laplace_marginal(const firtree::ResponseTree& tree, const std::vector<int>& y,
                               const std::vector<double>& alpha, double variance) {
  const ModeFit m = fit_mode(tree, y, alpha, variance);
  return m.value + 0.5 * std::log(2.0 * std::numbers::pi) - 0.5 * std::log(m.curvature);
}

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace oracle
