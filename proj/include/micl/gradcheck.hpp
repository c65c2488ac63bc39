#pragma once

#include <cmath>
#include <vector>

#include "micl/diffcore.hpp"
#include "micl/flat_params.hpp"
#include "micl/types.hpp"

namespace micl::gradcheck {

// Relative-error convention shared by all suites: |a-b| over the larger
// magnitude, floored so that agreeing near-zero coordinates compare as 0.
inline double relative_error(double a, double b, double floor = 1e-8) {
  const double mag = std::max(std::abs(a), std::abs(b));
  if (mag < 1e-300) return 0.0;
  return std::abs(a - b) / std::max(mag, floor);
}

inline double max_relative_error(const Vector& a, const Vector& b, double floor = 1e-8) {
  double worst = 0.0;
  for (Index i = 0; i < a.size(); ++i) worst = std::max(worst, relative_error(a[i], b[i], floor));
  return worst;
}

// Central-difference gradient; evaluates the loss at plain doubles only.
template <class F>
Vector fd_gradient(F&& loss, const Vector& theta, double eps) {
  Vector g(theta.size());
  Vector probe = theta;
  for (Index i = 0; i < theta.size(); ++i) {
    probe[i] = theta[i] + eps;
    const double up = loss(std::as_const(probe));
    probe[i] = theta[i] - eps;
    const double down = loss(std::as_const(probe));
    probe[i] = theta[i];
    g[i] = (up - down) / (2.0 * eps);
  }
  return g;
}

// Finite difference of exact gradients: (grad(theta+eps v) - grad(theta-eps v)) / 2eps.
template <class F>
Vector fd_hvp(F&& loss, const FlatParams& theta, const FlatParams& v, double eps) {
  FlatParams up = theta;
  up.values() += eps * v.values();
  FlatParams down = theta;
  down.values() -= eps * v.values();
  const Vector gu = diffcore::value_and_grad(loss, up).gradient.values();
  const Vector gd = diffcore::value_and_grad(loss, down).gradient.values();
  return (gu - gd) / (2.0 * eps);
}

// Per-coordinate central differences of outer(theta_K(E)) over exemplar
// entries; each probe reruns the forward unroll.
template <class InnerF, class OuterF>
Matrix fd_hypergradient(InnerF&& inner, OuterF&& outer, const FlatParams& theta0,
                        const Matrix& exemplars, const UnrollSpec& spec, double eps) {
  Matrix g(exemplars.rows(), exemplars.cols());
  Matrix probe = exemplars;
  for (Index c = 0; c < exemplars.cols(); ++c) {
    for (Index r = 0; r < exemplars.rows(); ++r) {
      probe(r, c) = exemplars(r, c) + eps;
      const double up = diffcore::unrolled_outer_value(inner, outer, theta0, probe, spec);
      probe(r, c) = exemplars(r, c) - eps;
      const double down = diffcore::unrolled_outer_value(inner, outer, theta0, probe, spec);
      probe(r, c) = exemplars(r, c);
      g(r, c) = (up - down) / (2.0 * eps);
    }
  }
  return g;
}

}  // namespace micl::gradcheck
