#ifndef TRL_TESTS_HELPERS_HPP
#define TRL_TESTS_HELPERS_HPP

#include <functional>

#include "trl/common.hpp"

namespace trl_test {

using trl::Index;
using trl::Mat;
using trl::Vec;

// central-difference gradient of a scalar function
inline Vec fd_gradient(const std::function<double(const Vec&)>& f, const Vec& theta,
                       double h = 1e-5) {
  Vec g(theta.size());
  Vec t = theta;
  for (Index i = 0; i < theta.size(); ++i) {
    double step = h * std::max(1.0, std::abs(theta[i]));
    t[i] = theta[i] + step;
    double fp = f(t);
    t[i] = theta[i] - step;
    double fm = f(t);
    t[i] = theta[i];
    g[i] = (fp - fm) / (2.0 * step);
  }
  return g;
}

// central-difference Hessian from an exact gradient callback
inline Mat fd_hessian(const std::function<Vec(const Vec&)>& grad, const Vec& theta,
                      double h = 1e-5) {
  Index n = theta.size();
  Mat H(n, n);
  Vec t = theta;
  for (Index j = 0; j < n; ++j) {
    double step = h * std::max(1.0, std::abs(theta[j]));
    t[j] = theta[j] + step;
    Vec gp = grad(t);
    t[j] = theta[j] - step;
    Vec gm = grad(t);
    t[j] = theta[j];
    H.col(j) = (gp - gm) / (2.0 * step);
  }
  return 0.5 * (H + H.transpose());
}

inline double rel_err(double got, double want) {
  return std::abs(got - want) / std::max(1.0, std::abs(want));
}

inline double rel_err(const Vec& got, const Vec& want) {
  return (got - want).norm() / std::max(1.0, want.norm());
}

inline double rel_err(const Mat& got, const Mat& want) {
  return (got - want).norm() / std::max(1.0, want.norm());
}

}  // namespace trl_test

#endif
