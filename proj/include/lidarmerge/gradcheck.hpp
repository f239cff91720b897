#pragma once

// Central finite-difference checks for the loss kernels.

#include "lidarmerge/core.hpp"

#include <functional>

namespace lidarmerge::gradcheck {

inline constexpr double kDefaultStep = 1e-5;
inline constexpr double kDefaultTolerance = 1e-4;

using Objective = std::function<double(const std::vector<FeatureMatrix>&)>;

/// Numerical gradient of f with respect to inputs[which].
inline FeatureMatrix numerical_gradient(const Objective& f, std::vector<FeatureMatrix> inputs, std::size_t which,
                                        double h = kDefaultStep) {
  FeatureMatrix& x = inputs.at(which);
  FeatureMatrix g(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const double orig = x(i, j);
      x(i, j) = orig + h;
      const double up = f(inputs);
      x(i, j) = orig - h;
      const double down = f(inputs);
      x(i, j) = orig;
      g(i, j) = (up - down) / (2.0 * h);
    }
  }
  return g;
}

/// ||a - n|| / max(||a||, ||n||), or 0 when both vanish.
inline double relative_error(const FeatureMatrix& analytic, const FeatureMatrix& numerical) {
  const double scale = std::max(analytic.norm(), numerical.norm());
  if (scale <= 1e-12) return (analytic - numerical).norm();
  return (analytic - numerical).norm() / scale;
}

struct Report {
  std::vector<double> errors;  // one per checked input
  double max_error = 0.0;
  bool passed(double tol = kDefaultTolerance) const { return max_error < tol; }
};

/// Compares analytic[k] against the numerical gradient of inputs[k] for every
/// k < analytic.size().
inline Report check(const Objective& f, const std::vector<FeatureMatrix>& inputs,
                    const std::vector<FeatureMatrix>& analytic, double h = kDefaultStep) {
  if (analytic.size() > inputs.size()) {
    throw Error(ErrorKind::length_mismatch, "gradcheck", "more gradients than inputs");
  }
  Report r;
  for (std::size_t k = 0; k < analytic.size(); ++k) {
    const FeatureMatrix num = numerical_gradient(f, inputs, k, h);
    if (num.rows() != analytic[k].rows() || num.cols() != analytic[k].cols()) {
      throw Error(ErrorKind::length_mismatch, "gradcheck", "gradient " + std::to_string(k) + " has the wrong shape");
    }
    r.errors.push_back(relative_error(analytic[k], num));
    r.max_error = std::max(r.max_error, r.errors.back());
  }
  return r;
}

}  // namespace lidarmerge::gradcheck
