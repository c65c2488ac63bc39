#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "micl/diffcore.hpp"
#include "micl/model.hpp"
#include "micl/rng.hpp"

using namespace micl;

namespace {

// Test-side oracles: plain-double central differences, written independently
// of the tape machinery they check.
template <class F>
Vector oracle_fd_gradient(F&& f, const Vector& theta, double eps) {
  Vector g(theta.size());
  Vector p = theta;
  for (Index i = 0; i < theta.size(); ++i) {
    p[i] = theta[i] + eps;
    const double up = f(p);
    p[i] = theta[i] - eps;
    const double down = f(p);
    p[i] = theta[i];
    g[i] = (up - down) / (2.0 * eps);
  }
  return g;
}

double rel_err(double a, double b) {
  const double mag = std::max(std::abs(a), std::abs(b));
  if (mag < 1e-300) return 0.0;
  return std::abs(a - b) / std::max(mag, 1e-8);
}

double max_rel_err(const Vector& a, const Vector& b) {
  double worst = 0.0;
  for (Index i = 0; i < a.size(); ++i) worst = std::max(worst, rel_err(a[i], b[i]));
  return worst;
}

FlatParams make_params(std::initializer_list<double> values) {
  auto layout = std::make_shared<FlatLayout>();
  layout->add("theta", {static_cast<Index>(values.size())});
  Vector v(static_cast<Index>(values.size()));
  Index i = 0;
  for (double x : values) v[i++] = x;
  return FlatParams(std::move(layout), std::move(v));
}

struct SumOfSquares {
  template <class Scalar>
  Scalar operator()(const VecX<Scalar>& v) const {
    Scalar s = Scalar(0);
    for (Index i = 0; i < v.size(); ++i) s += v[i] * v[i];
    return s;
  }
};

// softmax-regression cross-entropy on a small fixed batch
struct SoftmaxRegressionLoss {
  Matrix x;
  std::vector<int> y;
  model::ModelDims dims;

  template <class Scalar>
  Scalar operator()(const VecX<Scalar>& flat) const {
    auto layers = model::layers_from_flat<Scalar>(dims, flat);
    MatX<Scalar> xs = x.template cast<Scalar>();
    return model::cross_entropy_mean(model::forward_layers<Scalar>(layers, dims.activation, xs),
                                     y);
  }
};

SoftmaxRegressionLoss make_softmax_loss(Index width, Index classes, Index rows,
                                        std::uint64_t seed) {
  SoftmaxRegressionLoss loss;
  auto rng = make_rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  loss.x.resize(rows, width);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < width; ++c) loss.x(r, c) = noise(rng);
    loss.y.push_back(static_cast<int>(r % classes));
  }
  loss.dims.activation = model::Activation::kIdentity;
  loss.dims.layer_shapes = {{classes, width}};
  return loss;
}

struct TwoLayerLoss {
  Matrix x;
  std::vector<int> y;
  model::ModelDims dims;

  template <class Scalar>
  Scalar operator()(const VecX<Scalar>& flat) const {
    auto layers = model::layers_from_flat<Scalar>(dims, flat);
    MatX<Scalar> xs = x.template cast<Scalar>();
    return model::cross_entropy_mean(model::forward_layers<Scalar>(layers, dims.activation, xs),
                                     y);
  }
};

TwoLayerLoss make_two_layer_loss(Index width, Index hidden, Index classes, Index rows,
                                 std::uint64_t seed) {
  TwoLayerLoss loss;
  auto rng = make_rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  loss.x.resize(rows, width);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < width; ++c) loss.x(r, c) = noise(rng);
    loss.y.push_back(static_cast<int>(r % classes));
  }
  loss.dims.activation = model::Activation::kTanh;
  loss.dims.layer_shapes = {{hidden, width}, {classes, hidden}};
  return loss;
}

FlatParams random_flat_for(const model::ModelDims& dims, std::uint64_t seed) {
  auto layout = std::make_shared<FlatLayout>();
  Index total = 0;
  for (std::size_t q = 0; q < dims.layer_shapes.size(); ++q) {
    auto [rows, cols] = dims.layer_shapes[q];
    layout->add("layer" + std::to_string(q) + ".W", {rows, cols});
    layout->add("layer" + std::to_string(q) + ".b", {rows});
    total += rows * cols + rows;
  }
  auto rng = make_rng(seed);
  std::normal_distribution<double> noise(0.0, 0.5);
  Vector v(total);
  for (Index i = 0; i < total; ++i) v[i] = noise(rng);
  return FlatParams(std::move(layout), std::move(v));
}

}  // namespace

TEST_CASE("value_and_grad: analytic quadratic") {
  auto theta = make_params({1.0, 2.0});
  auto vg = diffcore::value_and_grad(SumOfSquares{}, theta);
  CHECK(vg.value == doctest::Approx(5.0).epsilon(1e-15));
  CHECK(vg.gradient[0] == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(vg.gradient[1] == doctest::Approx(4.0).epsilon(1e-15));
}

TEST_CASE("value_and_grad: constant loss has zero gradient") {
  auto theta = make_params({3.0, -1.0, 0.5});
  auto constant = [](const auto& v) {
    using S = std::decay_t<decltype(v[0])>;
    (void)v;
    return S(7.0);
  };
  auto vg = diffcore::value_and_grad(constant, theta);
  CHECK(vg.value == 7.0);
  for (Index i = 0; i < 3; ++i) CHECK(vg.gradient[i] == 0.0);
}

TEST_CASE("value_and_grad: softmax regression matches central differences") {
  auto loss = make_softmax_loss(3, 2, 1, 42);  // one sample, as in the stated case
  auto theta = random_flat_for(loss.dims, 43);
  auto vg = diffcore::value_and_grad(loss, theta);
  Vector fd = oracle_fd_gradient([&](const Vector& v) { return loss(v); }, theta.values(), 1e-5);
  CHECK(max_rel_err(vg.gradient.values(), fd) < 1e-6);
}

TEST_CASE("value_and_grad: non-finite loss names the failure") {
  auto theta = make_params({0.0});
  auto bad = [](const auto& v) { return log(v[0]); };  // log 0 = -inf
  CHECK_THROWS_AS(diffcore::value_and_grad(bad, theta), NumericError);
}

TEST_CASE("value_and_grad: non-finite gradient carries the block name") {
  auto layout = std::make_shared<FlatLayout>();
  layout->add("alpha", {1});
  layout->add("beta", {1});
  FlatParams theta(layout, (Vector(2) << 1.0, 0.0).finished());
  auto bad = [](const auto& v) { return v[0] + sqrt(v[1]); };  // d sqrt/dx at 0 = inf
  try {
    diffcore::value_and_grad(bad, theta);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(e.block() == "beta");
  }
}

TEST_CASE("hessian_vector_product: quadratic form") {
  auto theta = make_params({1.0, 1.0});
  auto quad = [](const auto& v) {
    using S = std::decay_t<decltype(v[0])>;
    return S(0.5) * (S(2) * v[0] * v[0] + S(4) * v[1] * v[1]);
  };
  auto v = make_params({1.0, 1.0});
  auto hv = diffcore::hessian_vector_product(quad, theta, v);
  CHECK(hv[0] == doctest::Approx(2.0).epsilon(1e-14));
  CHECK(hv[1] == doctest::Approx(4.0).epsilon(1e-14));

  auto zero = make_params({0.0, 0.0});
  auto hz = diffcore::hessian_vector_product(quad, theta, zero);
  CHECK(hz[0] == 0.0);
  CHECK(hz[1] == 0.0);
}

TEST_CASE("hessian_vector_product: layout mismatch is a shape error") {
  auto theta = make_params({1.0, 2.0});
  auto other = make_params({1.0, 2.0, 3.0});
  CHECK_THROWS_AS(diffcore::hessian_vector_product(SumOfSquares{}, theta, other), ShapeError);
}

TEST_CASE("hessian_vector_product: two-layer network matches gradient differences") {
  auto loss = make_two_layer_loss(2, 4, 2, 6, 7);
  auto theta = random_flat_for(loss.dims, 8);
  auto rng = make_rng(9);
  std::normal_distribution<double> noise(0.0, 1.0);
  FlatParams v = FlatParams::zeros_like(theta);
  for (Index i = 0; i < v.size(); ++i) v[i] = noise(rng);

  auto hv = diffcore::hessian_vector_product(loss, theta, v);

  // oracle: finite difference of exact gradients
  const double eps = 1e-5;
  FlatParams up = theta;
  up.values() += eps * v.values();
  FlatParams down = theta;
  down.values() -= eps * v.values();
  Vector fd = (diffcore::value_and_grad(loss, up).gradient.values() -
               diffcore::value_and_grad(loss, down).gradient.values()) /
              (2.0 * eps);
  CHECK(max_rel_err(hv.values(), fd) < 1e-4);
}

TEST_CASE("hessian_vector_product: linear in v") {
  auto loss = make_two_layer_loss(2, 3, 2, 5, 17);
  auto theta = random_flat_for(loss.dims, 18);
  auto rng = make_rng(19);
  std::normal_distribution<double> noise(0.0, 1.0);
  FlatParams v1 = FlatParams::zeros_like(theta);
  FlatParams v2 = FlatParams::zeros_like(theta);
  for (Index i = 0; i < theta.size(); ++i) {
    v1[i] = noise(rng);
    v2[i] = noise(rng);
  }
  const double a = 0.7, b = -1.3;
  FlatParams combo = FlatParams::zeros_like(theta);
  combo.values() = a * v1.values() + b * v2.values();

  Vector lhs = diffcore::hessian_vector_product(loss, theta, combo).values();
  Vector rhs = a * diffcore::hessian_vector_product(loss, theta, v1).values() +
               b * diffcore::hessian_vector_product(loss, theta, v2).values();
  CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-10);
}

namespace {

// K=1 quadratic instance with a hand-derived chain rule.
struct QuadraticInner {
  template <class ThetaVec, class ExMat>
  auto operator()(const ThetaVec& theta, const ExMat& ex) const {
    using S = std::decay_t<decltype(theta[0])>;
    S s = S(0);
    for (Index i = 0; i < theta.size(); ++i) {
      auto d = theta[i] - ex(0, i);
      s += d * d;
    }
    return S(0.5) * s;
  }
};

struct QuadraticOuter {
  Vector target;
  template <class ThetaVec, class ExMat>
  auto operator()(const ThetaVec& theta, const ExMat&) const {
    using S = std::decay_t<decltype(theta[0])>;
    S s = S(0);
    for (Index i = 0; i < theta.size(); ++i) {
      auto d = theta[i] - S(target[i]);
      s += d * d;
    }
    return S(0.5) * s;
  }
};

}  // namespace

TEST_CASE("unrolled_hypergradient: K=0 with outer independent of E is exactly zero") {
  auto theta = make_params({1.0, 2.0});
  Matrix ex(1, 2);
  ex << 3.0, 4.0;
  auto hg = diffcore::unrolled_hypergradient(QuadraticInner{}, QuadraticOuter{Vector::Zero(2)},
                                             theta, ex, UnrollSpec(0, 0.1));
  CHECK(hg.exemplar_grad(0, 0) == 0.0);
  CHECK(hg.exemplar_grad(0, 1) == 0.0);
  CHECK(hg.theta_final.values() == theta.values());
}

TEST_CASE("unrolled_hypergradient: K=1 quadratic matches the hand-derived chain rule") {
  // theta1 = theta0 - a(theta0 - e); outer = 0.5||theta1 - t||^2
  // d outer/d e = a * (theta1 - t)
  auto theta = make_params({1.0, 2.0});
  Matrix ex(1, 2);
  ex << 3.0, -1.0;
  const double alpha = 0.1;
  Vector target = (Vector(2) << 0.5, 0.5).finished();
  auto hg = diffcore::unrolled_hypergradient(QuadraticInner{}, QuadraticOuter{target}, theta, ex,
                                             UnrollSpec(1, alpha));
  Vector theta1 = theta.values() - alpha * (theta.values() - ex.row(0).transpose());
  Vector expect = alpha * (theta1 - target);
  CHECK(hg.exemplar_grad(0, 0) == doctest::Approx(expect[0]).epsilon(1e-14));
  CHECK(hg.exemplar_grad(0, 1) == doctest::Approx(expect[1]).epsilon(1e-14));
  CHECK(hg.outer_value == doctest::Approx(0.5 * (theta1 - target).squaredNorm()).epsilon(1e-14));
}

namespace {

struct BilevelFixture {
  model::ModelDims dims;
  Matrix exemplars;
  std::vector<int> ex_labels;
  Matrix val_x;
  std::vector<int> val_labels;
  FlatParams theta0;

  auto inner() const {
    return [this](const auto& th, const auto& ex) {
      using S = std::decay_t<decltype(th[0])>;
      auto layers = model::layers_from_flat<S>(dims, th);
      return model::cross_entropy_mean(model::forward_layers<S>(layers, dims.activation, ex),
                                       ex_labels);
    };
  }
  auto outer() const {
    return [this](const auto& th, const auto&) {
      using S = std::decay_t<decltype(th[0])>;
      auto layers = model::layers_from_flat<S>(dims, th);
      MatX<S> xv = val_x.template cast<S>();
      return model::cross_entropy_mean(model::forward_layers<S>(layers, dims.activation, xv),
                                       val_labels);
    };
  }
};

// 2-class Gaussian task with a 1-hidden-layer tanh classifier.
BilevelFixture make_bilevel_fixture(Index hidden, Index exemplars_per_class, Index val_per_class,
                                    std::uint64_t seed) {
  BilevelFixture f;
  auto rng = make_rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  const Index m = 2 * exemplars_per_class;
  f.exemplars.resize(m, 2);
  for (Index r = 0; r < m; ++r) {
    const double center = r < exemplars_per_class ? -1.5 : 1.5;
    f.exemplars(r, 0) = center + noise(rng);
    f.exemplars(r, 1) = center + noise(rng);
    f.ex_labels.push_back(r < exemplars_per_class ? 0 : 1);
  }
  const Index n = 2 * val_per_class;
  f.val_x.resize(n, 2);
  for (Index r = 0; r < n; ++r) {
    const double center = r < val_per_class ? -1.5 : 1.5;
    f.val_x(r, 0) = center + noise(rng);
    f.val_x(r, 1) = center + noise(rng);
    f.val_labels.push_back(r < val_per_class ? 0 : 1);
  }
  f.dims.activation = model::Activation::kTanh;
  f.dims.layer_shapes = {{hidden, 2}, {2, hidden}};

  auto layout = std::make_shared<FlatLayout>();
  layout->add("layer0.W", {hidden, 2});
  layout->add("layer0.b", {hidden});
  layout->add("layer1.W", {2, hidden});
  layout->add("layer1.b", {2});
  Vector v(hidden * 2 + hidden + 2 * hidden + 2);
  std::normal_distribution<double> wnoise(0.0, 0.4);
  for (Index i = 0; i < v.size(); ++i) v[i] = wnoise(rng);
  f.theta0 = FlatParams(std::move(layout), std::move(v));
  return f;
}

}  // namespace

TEST_CASE("unrolled_hypergradient: K=3 tanh network matches per-coordinate differences") {
  auto f = make_bilevel_fixture(8, 2, 12, 101);
  UnrollSpec spec(3, 0.01);
  auto hg = diffcore::unrolled_hypergradient(f.inner(), f.outer(), f.theta0, f.exemplars, spec);

  const double eps = 1e-5;
  Matrix probe = f.exemplars;
  double worst = 0.0;
  for (Index c = 0; c < probe.cols(); ++c)
    for (Index r = 0; r < probe.rows(); ++r) {
      probe(r, c) = f.exemplars(r, c) + eps;
      const double up = diffcore::unrolled_outer_value(f.inner(), f.outer(), f.theta0, probe, spec);
      probe(r, c) = f.exemplars(r, c) - eps;
      const double down =
          diffcore::unrolled_outer_value(f.inner(), f.outer(), f.theta0, probe, spec);
      probe(r, c) = f.exemplars(r, c);
      worst = std::max(worst, rel_err(hg.exemplar_grad(r, c), (up - down) / (2.0 * eps)));
    }
  CHECK(worst < 1e-4);
}

TEST_CASE("unrolled_hypergradient: deterministic bit-identical reruns") {
  auto f = make_bilevel_fixture(6, 2, 8, 202);
  UnrollSpec spec(4, 0.02);
  auto a = diffcore::unrolled_hypergradient(f.inner(), f.outer(), f.theta0, f.exemplars, spec);
  auto b = diffcore::unrolled_hypergradient(f.inner(), f.outer(), f.theta0, f.exemplars, spec);
  CHECK(a.outer_value == b.outer_value);
  CHECK(a.exemplar_grad == b.exemplar_grad);
  CHECK(a.theta_final.values() == b.theta_final.values());
}

TEST_CASE("unrolled_hypergradient: divergence reports the step index") {
  auto theta = make_params({1.0});
  Matrix ex(1, 1);
  ex << 1.0;
  // inner gradient = huge constant; lr 1 blows past the guard immediately
  auto inner = [](const auto& th, const auto&) {
    using S = std::decay_t<decltype(th[0])>;
    return S(1e9) * th[0];
  };
  auto outer = [](const auto& th, const auto&) { return th[0]; };
  CHECK_THROWS_AS(
      diffcore::unrolled_hypergradient(inner, outer, theta, ex, UnrollSpec(3, 1.0)),
      DivergenceError);
}
