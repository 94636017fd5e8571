#pragma once

// Box-constrained quasi-Newton minimizer: BFGS on the free variables,
// projection onto the box, Armijo backtracking.

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace firtree {

struct BoxBfgsOptions {
  int max_iter = 500;
  // Converged when the infinity norm of the projected gradient is below this.
  double gtol = 1e-5;
  int max_backtracks = 40;
};

struct BoxBfgsResult {
  Eigen::VectorXd x;
  double value = 0.0;
  Eigen::VectorXd gradient;
  int iterations = 0;
  bool converged = false;
  std::string message;
  std::vector<double> trace;  // f at the start and after each accepted step
};

namespace detail {

inline Eigen::VectorXd project_box(const Eigen::VectorXd& x, const Eigen::VectorXd& lower,
                                   const Eigen::VectorXd& upper) {
  return x.cwiseMax(lower).cwiseMin(upper);
}

inline Eigen::VectorXd projected_gradient(const Eigen::VectorXd& x, const Eigen::VectorXd& g,
                                          const Eigen::VectorXd& lower, const Eigen::VectorXd& upper) {
  Eigen::VectorXd pg = g;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    if ((x[i] <= lower[i] && g[i] > 0.0) || (x[i] >= upper[i] && g[i] < 0.0)) pg[i] = 0.0;
  }
  return pg;
}

}  // namespace detail

// `objective(x, grad)` returns f(x) and writes its gradient into `grad`.
// Accepted steps never increase f.
template <typename Objective>
BoxBfgsResult minimize_box_bfgs(Objective&& objective, Eigen::VectorXd x0, const Eigen::VectorXd& lower,
                                const Eigen::VectorXd& upper, const BoxBfgsOptions& options = {}) {
  const Eigen::Index n = x0.size();
  BoxBfgsResult res;
  res.x = detail::project_box(x0, lower, upper);
  res.gradient = Eigen::VectorXd::Zero(n);
  res.value = objective(res.x, res.gradient);
  if (!std::isfinite(res.value)) {
    res.message = "objective is not finite at the starting point";
    return res;
  }
  res.trace.push_back(res.value);

  Eigen::MatrixXd inv_hessian = Eigen::MatrixXd::Identity(n, n);
  bool fresh = true;
  Eigen::VectorXd g_new(n);

  while (true) {
    const Eigen::VectorXd pg = detail::projected_gradient(res.x, res.gradient, lower, upper);
    if (pg.lpNorm<Eigen::Infinity>() < options.gtol) {
      res.converged = true;
      res.message = "projected gradient below tolerance";
      return res;
    }
    if (res.iterations >= options.max_iter) {
      res.message = "iteration limit reached";
      return res;
    }

    // Variables pinned at a bound with the gradient pushing outward stay fixed.
    Eigen::VectorXd direction = Eigen::VectorXd::Zero(n);
    {
      Eigen::VectorXd g_free = pg;
      Eigen::MatrixXd h = inv_hessian;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (pg[i] == 0.0 && res.gradient[i] != 0.0) {
          h.row(i).setZero();
          h.col(i).setZero();
        }
      }
      direction = -h * g_free;
    }
    double slope = res.gradient.dot(direction);
    if (!(slope < 0.0)) {
      inv_hessian.setIdentity();
      fresh = true;
      direction = -pg;
      slope = res.gradient.dot(direction);
    }

    double step = 1.0;
    if (fresh) step = std::min(1.0, 1.0 / std::max(1e-12, direction.lpNorm<Eigen::Infinity>()));

    bool accepted = false;
    Eigen::VectorXd x_new;
    double f_new = 0.0;
    for (int bt = 0; bt < options.max_backtracks; ++bt) {
      x_new = detail::project_box(res.x + step * direction, lower, upper);
      f_new = objective(x_new, g_new);
      const double decrease = res.gradient.dot(x_new - res.x);
      if (std::isfinite(f_new) && f_new <= res.value + 1e-4 * decrease) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      if (!fresh) {
        inv_hessian.setIdentity();
        fresh = true;
        continue;
      }
      res.message = "line search failed to decrease the objective";
      return res;
    }

    const Eigen::VectorXd s = x_new - res.x;
    const Eigen::VectorXd y = g_new - res.gradient;
    res.x = std::move(x_new);
    res.value = f_new;
    res.gradient = g_new;
    ++res.iterations;
    res.trace.push_back(res.value);

    const double sy = s.dot(y);
    if (sy > 1e-10 * s.norm() * y.norm()) {
      if (fresh) inv_hessian *= sy / y.squaredNorm();
      const double rho = 1.0 / sy;
      const Eigen::MatrixXd left = Eigen::MatrixXd::Identity(n, n) - rho * s * y.transpose();
      inv_hessian = left * inv_hessian * left.transpose() + rho * s * s.transpose();
      fresh = false;
    }
  }
}

}  // namespace firtree
