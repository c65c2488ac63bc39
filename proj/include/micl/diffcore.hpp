#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include "micl/errors.hpp"
#include "micl/flat_params.hpp"
#include "micl/rvar.hpp"
#include "micl/types.hpp"

namespace micl::diffcore {

inline constexpr double kDivergenceGuard = 1e8;

struct ValueGrad {
  double value = 0.0;
  FlatParams gradient;
};

namespace detail {

template <class T>
VecX<ad::Rvar<T>> make_leaf_vector(ad::Tape<T>& tape, const Vector& values,
                                   const Vector* tangent = nullptr) {
  VecX<ad::Rvar<T>> out(values.size());
  for (Index i = 0; i < values.size(); ++i) {
    if constexpr (std::is_same_v<T, ad::Dual>) {
      out[i] = ad::Rvar<T>::leaf(tape, ad::Dual(values[i], tangent ? (*tangent)[i] : 0.0));
    } else {
      out[i] = ad::Rvar<T>::leaf(tape, values[i]);
    }
  }
  return out;
}

template <class T>
MatX<ad::Rvar<T>> make_leaf_matrix(ad::Tape<T>& tape, const Matrix& values) {
  MatX<ad::Rvar<T>> out(values.rows(), values.cols());
  for (Index c = 0; c < values.cols(); ++c)
    for (Index r = 0; r < values.rows(); ++r)
      out(r, c) = ad::Rvar<T>::leaf(tape, T(values(r, c)));
  return out;
}

inline void check_gradient_finite(const Vector& grad, const FlatLayout& layout) {
  for (Index i = 0; i < grad.size(); ++i)
    if (!std::isfinite(grad[i]))
      throw NumericError("non-finite gradient entry", layout.block_of(i));
}

}  // namespace detail

// Exact reverse-mode value and gradient of a scalar loss. The loss callable
// must be generic over the scalar type: Scalar f(const VecX<Scalar>&).
template <class F>
ValueGrad value_and_grad(F&& loss, const FlatParams& theta) {
  ad::Tape<double> tape;
  auto leaves = detail::make_leaf_vector<double>(tape, theta.values());
  ad::Rev y = loss(std::as_const(leaves));
  if (!ad::is_finite(y)) throw NumericError("non-finite loss value", "value");

  FlatParams grad = FlatParams::zeros_like(theta);
  if (!y.is_constant()) {
    auto adj = tape.adjoints(y.index());
    for (Index i = 0; i < theta.size(); ++i) grad[i] = adj[static_cast<std::size_t>(i)];
  }
  detail::check_gradient_finite(grad.values(), theta.layout());
  return ValueGrad{ad::value_part(y), std::move(grad)};
}

// Exact H(theta)·v via one reverse sweep over dual numbers: leaves carry
// value theta_i and tangent v_i; the tangent part of each leaf adjoint is
// the Hessian-vector product coordinate.
template <class F>
FlatParams hessian_vector_product(F&& loss, const FlatParams& theta, const FlatParams& v) {
  if (!theta.same_layout(v) || theta.size() != v.size())
    throw ShapeError("hessian_vector_product: v layout does not match theta");

  ad::Tape<ad::Dual> tape;
  auto leaves = detail::make_leaf_vector<ad::Dual>(tape, theta.values(), &v.values());
  ad::RevDual y = loss(std::as_const(leaves));
  if (!ad::is_finite(y)) throw NumericError("non-finite loss value", "value");

  FlatParams hv = FlatParams::zeros_like(theta);
  if (!y.is_constant()) {
    auto adj = tape.adjoints(y.index());
    for (Index i = 0; i < theta.size(); ++i)
      hv[i] = ad::tangent_part(adj[static_cast<std::size_t>(i)]);
  }
  detail::check_gradient_finite(hv.values(), theta.layout());
  return hv;
}

struct HypergradResult {
  Matrix exemplar_grad;   // d outer / d E, same shape as E
  FlatParams theta_final; // parameters after the K unrolled steps
  double outer_value = 0.0;
};

namespace detail {

inline void check_unroll_state(const Vector& theta, int step) {
  for (Index i = 0; i < theta.size(); ++i)
    if (!std::isfinite(theta[i]) || std::abs(theta[i]) > kDivergenceGuard)
      throw DivergenceError("parameter magnitude exceeded guard during unrolling", step);
}

// Gradient of f(theta, E) with respect to theta, E held constant.
template <class F>
Vector grad_wrt_theta(F&& f, const Vector& theta, const Matrix& exemplars) {
  ad::Tape<double> tape;
  auto t = make_leaf_vector<double>(tape, theta);
  MatX<ad::Rev> e = exemplars.cast<ad::Rev>();
  ad::Rev y = f(std::as_const(t), std::as_const(e));
  Vector g = Vector::Zero(theta.size());
  if (!y.is_constant()) {
    auto adj = tape.adjoints(y.index());
    for (Index i = 0; i < theta.size(); ++i) g[i] = adj[static_cast<std::size_t>(i)];
  }
  return g;
}

}  // namespace detail

// Runs the forward unroll theta_{t+1} = theta_t - lr * d inner/d theta and
// returns outer(theta_K, E). Shares no differentiation state with the
// hypergradient path; also used to evaluate candidate exemplars cheaply.
template <class InnerF, class OuterF>
double unrolled_outer_value(InnerF&& inner, OuterF&& outer, const FlatParams& theta0,
                            const Matrix& exemplars, const UnrollSpec& spec) {
  Vector theta = theta0.values();
  detail::check_unroll_state(theta, 0);
  for (int t = 0; t < spec.steps; ++t) {
    theta -= spec.inner_lr * detail::grad_wrt_theta(inner, theta, exemplars);
    detail::check_unroll_state(theta, t);
  }
  return outer(std::as_const(theta), std::as_const(exemplars));
}

// Exact hypergradient of outer(theta_K, E) with respect to E, where theta_K
// results from K plain gradient-descent steps on inner(theta, E) (stored
// forward pass, reverse pass of Hessian-vector products):
//
//   p_K = d outer/d theta_K,   dE = d outer/d E (direct)
//   for t = K-1..0:
//     dE -= lr * (d^2 inner/dE dtheta) p_{t+1}
//     p_t = p_{t+1} - lr * (d^2 inner/dtheta^2) p_{t+1}
//
// Both contractions come from one dual-tape sweep per step.
template <class InnerF, class OuterF>
HypergradResult unrolled_hypergradient(InnerF&& inner, OuterF&& outer, const FlatParams& theta0,
                                       const Matrix& exemplars, const UnrollSpec& spec) {
  const Index n = theta0.size();
  std::vector<Vector> trajectory;
  trajectory.reserve(static_cast<std::size_t>(spec.steps) + 1);
  trajectory.push_back(theta0.values());
  detail::check_unroll_state(trajectory.back(), 0);

  for (int t = 0; t < spec.steps; ++t) {
    Vector g = detail::grad_wrt_theta(inner, trajectory.back(), exemplars);
    Vector next = trajectory.back() - spec.inner_lr * g;
    detail::check_unroll_state(next, t);
    trajectory.push_back(std::move(next));
  }

  // Outer loss at theta_K with both theta and E as leaves: yields p_K and
  // the direct dE term in one sweep.
  Vector p(n);
  Matrix de = Matrix::Zero(exemplars.rows(), exemplars.cols());
  double outer_value = 0.0;
  {
    ad::Tape<double> tape;
    auto tv = detail::make_leaf_vector<double>(tape, trajectory.back());
    auto ev = detail::make_leaf_matrix<double>(tape, exemplars);
    ad::Rev y = outer(std::as_const(tv), std::as_const(ev));
    if (!ad::is_finite(y)) throw NumericError("non-finite outer loss", "value");
    outer_value = ad::value_part(y);
    p.setZero();
    if (!y.is_constant()) {
      auto adj = tape.adjoints(y.index());
      for (Index i = 0; i < n; ++i) p[i] = adj[static_cast<std::size_t>(tv[i].index())];
      for (Index c = 0; c < exemplars.cols(); ++c)
        for (Index r = 0; r < exemplars.rows(); ++r)
          de(r, c) = adj[static_cast<std::size_t>(ev(r, c).index())];
    }
  }

  for (int t = spec.steps - 1; t >= 0; --t) {
    ad::Tape<ad::Dual> tape;
    auto tv = detail::make_leaf_vector<ad::Dual>(tape, trajectory[static_cast<std::size_t>(t)], &p);
    auto ev = detail::make_leaf_matrix<ad::Dual>(tape, exemplars);
    ad::RevDual y = inner(std::as_const(tv), std::as_const(ev));
    if (!ad::is_finite(y)) throw NumericError("non-finite inner loss in reverse pass", "value");
    if (y.is_constant()) continue;
    auto adj = tape.adjoints(y.index());
    for (Index c = 0; c < exemplars.cols(); ++c)
      for (Index r = 0; r < exemplars.rows(); ++r)
        de(r, c) -= spec.inner_lr *
                    ad::tangent_part(adj[static_cast<std::size_t>(ev(r, c).index())]);
    for (Index i = 0; i < n; ++i)
      p[i] -= spec.inner_lr * ad::tangent_part(adj[static_cast<std::size_t>(tv[i].index())]);
  }

  for (Index c = 0; c < de.cols(); ++c)
    for (Index r = 0; r < de.rows(); ++r)
      if (!std::isfinite(de(r, c)))
        throw NumericError("non-finite hypergradient entry", "exemplars");

  FlatParams theta_final(theta0.layout_ptr(), trajectory.back());
  return HypergradResult{std::move(de), std::move(theta_final), outer_value};
}

}  // namespace micl::diffcore
