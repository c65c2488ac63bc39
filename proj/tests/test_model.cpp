#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "micl/diffcore.hpp"
#include "micl/model.hpp"
#include "micl/rng.hpp"

using namespace micl;
using model::Activation;
using model::ClassifierParams;
using model::TransferParams;

namespace {

ClassifierParams one_layer(const Matrix& w, const Vector& b,
                           Activation act = Activation::kIdentity) {
  ClassifierParams p;
  p.layers.push_back({w, b});
  p.activation = act;
  return p;
}

ClassifierParams random_mlp(Index width, Index hidden, Index classes, std::uint64_t seed) {
  auto p = model::random_init({width, hidden, classes}, Activation::kTanh, 0.5, seed);
  auto rng = make_rng(mix_seed(seed, 5));
  std::normal_distribution<double> noise(0.0, 0.3);
  for (auto& l : p.layers)
    for (Index r = 0; r < l.b.size(); ++r) l.b[r] = noise(rng);
  return p;
}

Matrix random_batch(Index rows, Index width, std::uint64_t seed, double scale = 1.0) {
  auto rng = make_rng(seed);
  std::normal_distribution<double> noise(0.0, scale);
  Matrix x(rows, width);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < width; ++c) x(r, c) = noise(rng);
  return x;
}

double rel_err(double a, double b) {
  const double mag = std::max(std::abs(a), std::abs(b));
  if (mag < 1e-300) return 0.0;
  return std::abs(a - b) / std::max(mag, 1e-8);
}

}  // namespace

TEST_CASE("forward: hand-computed single layer") {
  auto p = one_layer((Matrix(2, 2) << 1, 0, 0, 1).finished(),
                     (Vector(2) << 0.5, -0.5).finished());
  Matrix x(1, 2);
  x << 1, 1;
  Matrix logits = model::forward(p, std::nullopt, x);
  CHECK(logits(0, 0) == doctest::Approx(1.5).epsilon(1e-15));
  CHECK(logits(0, 1) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("forward: all-zero weights with identity activation give zero logits") {
  auto p = one_layer(Matrix::Zero(3, 2), Vector::Zero(3));
  Matrix x = random_batch(4, 2, 1);
  CHECK(model::forward(p, std::nullopt, x).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("forward: identity transfer leaves logits unchanged") {
  auto p = random_mlp(3, 5, 4, 2);
  auto t = TransferParams::identity_for(p);
  Matrix x = random_batch(6, 3, 3);
  Matrix plain = model::forward(p, std::nullopt, x);
  Matrix with = model::forward(p, t, x);
  CHECK((plain - with).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("forward: width mismatch names the layer") {
  auto p = random_mlp(3, 5, 2, 4);
  Matrix x = random_batch(2, 4, 5);
  CHECK_THROWS_AS(model::forward(p, std::nullopt, x), ShapeError);
}

TEST_CASE("apply_transfer: identity is exact, scaling doubles weights") {
  auto p = random_mlp(2, 4, 3, 6);
  auto t = TransferParams::identity_for(p);
  auto same = model::apply_transfer(p, t);
  for (std::size_t q = 0; q < p.layers.size(); ++q) {
    CHECK((same.layers[q].W - p.layers[q].W).cwiseAbs().maxCoeff() == 0.0);
    CHECK((same.layers[q].b - p.layers[q].b).cwiseAbs().maxCoeff() == 0.0);
  }

  auto single = one_layer((Matrix(2, 2) << 1, 2, 3, 4).finished(), (Vector(2) << 1, -1).finished());
  TransferParams dbl;
  dbl.layers.push_back({Vector::Constant(2, 2.0), Vector::Zero(2)});
  auto doubled = model::apply_transfer(single, dbl);
  CHECK((doubled.layers[0].W - 2.0 * single.layers[0].W).cwiseAbs().maxCoeff() == 0.0);
  CHECK((doubled.layers[0].b - single.layers[0].b).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("apply_transfer: materialized model matches transfer forward within 1e-12") {
  auto p = random_mlp(3, 6, 4, 7);
  TransferParams t;
  auto rng = make_rng(8);
  std::normal_distribution<double> noise(0.0, 0.3);
  for (const auto& l : p.layers) {
    TransferParams::Layer tl;
    tl.scale.resize(l.W.rows());
    tl.shift.resize(l.b.size());
    for (Index r = 0; r < tl.scale.size(); ++r) tl.scale[r] = 1.0 + noise(rng);
    for (Index r = 0; r < tl.shift.size(); ++r) tl.shift[r] = noise(rng);
    t.layers.push_back(std::move(tl));
  }
  Matrix x = random_batch(10, 3, 9);
  Matrix via_transfer = model::forward(p, t, x);
  Matrix via_apply = model::forward(model::apply_transfer(p, t), std::nullopt, x);
  CHECK((via_transfer - via_apply).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("tempered_softmax: symmetry, derived value, high-temperature limit") {
  Vector uniform = model::tempered_softmax((Vector(2) << 0, 0).finished(), 1.0);
  CHECK(uniform[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(uniform[1] == doctest::Approx(0.5).epsilon(1e-15));

  // scalar oracle: e^1 / (e^1 + e^0)
  Vector p = model::tempered_softmax((Vector(2) << 2, 0).finished(), 2.0);
  const double expect = std::exp(1.0) / (std::exp(1.0) + 1.0);
  CHECK(p[0] == doctest::Approx(expect).epsilon(1e-12));
  CHECK(p[1] == doctest::Approx(1.0 - expect).epsilon(1e-12));

  // tau -> inf flattens toward uniform
  Vector big = model::tempered_softmax((Vector(4) << 1.0, -1.0, 0.5, 0.0).finished(), 1e6);
  for (Index k = 0; k < 4; ++k) CHECK(std::abs(big[k] - 0.25) < 1e-5);
}

TEST_CASE("tempered_softmax: sums to one and is shift invariant") {
  auto rng = make_rng(11);
  std::normal_distribution<double> noise(0.0, 3.0);
  for (int trial = 0; trial < 50; ++trial) {
    Vector z(5);
    for (Index k = 0; k < 5; ++k) z[k] = noise(rng);
    const double tau = 1.0 + std::abs(noise(rng));
    Vector p = model::tempered_softmax(z, tau);
    CHECK(std::abs(p.sum() - 1.0) < 1e-12);
    for (Index k = 0; k < 5; ++k) CHECK(p[k] > 0.0);
    Vector shifted = model::tempered_softmax((z.array() + 17.25).matrix(), tau);
    CHECK((p - shifted).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("classification_loss: uniform logits give ln K exactly") {
  auto p = one_layer(Matrix::Zero(4, 2), Vector::Zero(4));
  Matrix x = random_batch(3, 2, 12);
  const double loss = model::classification_loss(p, x, {0, 1, 3});
  CHECK(std::abs(loss - std::log(4.0)) < 1e-12);
}

TEST_CASE("classification_loss: saturated true class vanishes") {
  auto p = one_layer(Matrix::Zero(3, 2), (Vector(3) << 50.0, 0.0, 0.0).finished());
  Matrix x = Matrix::Zero(2, 2);
  CHECK(model::classification_loss(p, x, {0, 0}) < 1e-20);
}

TEST_CASE("classification_loss: two-sample hand case") {
  // logits [[1,0],[0,1]] labels [0,1]: mean(-ln sigma), sigma = e/(e+1)
  auto p = one_layer((Matrix(2, 2) << 1, 0, 0, 1).finished(), Vector::Zero(2));
  Matrix x(2, 2);
  x << 1, 0, 0, 1;
  const double sigma = std::exp(1.0) / (std::exp(1.0) + 1.0);
  CHECK(model::classification_loss(p, x, {0, 1}) ==
        doctest::Approx(-std::log(sigma)).epsilon(1e-12));
}

TEST_CASE("classification_loss: out-of-range label") {
  auto p = one_layer(Matrix::Zero(2, 2), Vector::Zero(2));
  Matrix x = Matrix::Zero(1, 2);
  CHECK_THROWS_AS(model::classification_loss(p, x, {2}), LabelError);
}

TEST_CASE("distillation_loss: self-distillation equals teacher entropy") {
  auto p = one_layer(Matrix::Zero(2, 2), Vector::Zero(2));
  Matrix x = random_batch(5, 2, 13);
  const double loss = model::distillation_loss(p, p, x, 1.0, 2);
  CHECK(std::abs(loss - std::log(2.0)) < 1e-12);
}

TEST_CASE("distillation_loss: crossed logits derived value") {
  // teacher logits [2,0], student [0,2], tau=1:
  // loss = -(s ln(1-s) + (1-s) ln s), s = e^2/(e^2+1)
  auto teacher = one_layer(Matrix::Zero(2, 1), (Vector(2) << 2.0, 0.0).finished());
  auto student = one_layer(Matrix::Zero(2, 1), (Vector(2) << 0.0, 2.0).finished());
  Matrix x = Matrix::Zero(1, 1);
  const double s = std::exp(2.0) / (std::exp(2.0) + 1.0);
  const double expect = -(s * std::log(1.0 - s) + (1.0 - s) * std::log(s));
  // scalar oracle evaluates to 1.8885221669987378
  CHECK(expect == doctest::Approx(1.8885221669987378).epsilon(1e-14));
  CHECK(model::distillation_loss(student, teacher, x, 1.0, 2) ==
        doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("distillation_loss: bounded below by teacher entropy (Gibbs)") {
  for (int trial = 0; trial < 30; ++trial) {
    auto teacher = random_mlp(2, 4, 3, 100 + static_cast<std::uint64_t>(trial));
    auto student = random_mlp(2, 4, 3, 200 + static_cast<std::uint64_t>(trial));
    Matrix x = random_batch(4, 2, 300 + static_cast<std::uint64_t>(trial));
    const double cross = model::distillation_loss(student, teacher, x, 2.0, 3);
    const double self_loss = model::distillation_loss(teacher, teacher, x, 2.0, 3);
    CHECK(cross >= self_loss - 1e-12);
  }
}

TEST_CASE("distillation_loss: old-class count beyond a head width is a shape error") {
  auto teacher = one_layer(Matrix::Zero(2, 2), Vector::Zero(2));
  auto student = one_layer(Matrix::Zero(3, 2), Vector::Zero(3));
  Matrix x = Matrix::Zero(1, 2);
  CHECK_THROWS_AS(model::distillation_loss(student, teacher, x, 1.0, 3), ShapeError);
}

TEST_CASE("combined_loss: affine in lambda and exact at the endpoints") {
  auto teacher = random_mlp(2, 4, 2, 21);
  auto student = random_mlp(2, 4, 2, 22);
  Matrix x = random_batch(6, 2, 23);
  std::vector<int> y = {0, 1, 0, 1, 0, 1};

  const double lc = model::classification_loss(student, x, y);
  const double ld = model::distillation_loss(student, teacher, x, 2.0, 2);
  for (double lambda : {0.0, 0.25, 0.5, 1.0}) {
    const double combo = model::combined_loss(student, teacher, x, y, {lambda, 2.0}, 2);
    CHECK(std::abs(combo - (lambda * lc + (1.0 - lambda) * ld)) < 1e-12);
  }
}

TEST_CASE("grow_head: old-class logits unchanged") {
  auto p = random_mlp(3, 5, 4, 31);
  Matrix x = random_batch(7, 3, 32);
  Matrix before = model::forward(p, std::nullopt, x);
  auto grown = model::grow_head(p, 2, 0.01, 33);
  CHECK(grown.num_classes() == 6);
  Matrix after = model::forward(grown, std::nullopt, x);
  CHECK((after.leftCols(4) - before).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("model_level_update: zero epochs returns the transfer unchanged") {
  auto base = random_mlp(2, 4, 3, 41);
  auto teacher = random_mlp(2, 4, 3, 42);
  auto t = TransferParams::identity_for(base);
  Matrix x = random_batch(5, 2, 43);
  auto res = model::model_level_update(base, t, teacher, x, {0, 1, 2, 0, 1}, {0.5, 2.0}, 1e-4, 0);
  for (std::size_t q = 0; q < t.layers.size(); ++q) {
    CHECK((res.transfer.layers[q].scale - t.layers[q].scale).cwiseAbs().maxCoeff() == 0.0);
    CHECK((res.transfer.layers[q].shift - t.layers[q].shift).cwiseAbs().maxCoeff() == 0.0);
  }
  CHECK(res.loss_trace.size() == 1);
}

TEST_CASE("model_level_update: one tiny step decreases the combined loss") {
  auto base = random_mlp(2, 4, 3, 51);
  auto teacher = random_mlp(2, 4, 3, 52);
  auto t = TransferParams::identity_for(base);
  Matrix x = random_batch(12, 2, 53);
  std::vector<int> y;
  for (Index r = 0; r < 12; ++r) y.push_back(static_cast<int>(r % 3));
  auto res = model::model_level_update(base, t, teacher, x, y, {0.5, 2.0}, 1e-4, 1);
  REQUIRE(res.loss_trace.size() == 2);
  CHECK(res.loss_trace[1] < res.loss_trace[0]);
}

TEST_CASE("model_level_update: transfer gradients match central differences") {
  auto base = random_mlp(2, 4, 3, 61);
  auto teacher = random_mlp(2, 4, 3, 62);
  Matrix x = random_batch(9, 2, 63);
  std::vector<int> y;
  for (Index r = 0; r < 9; ++r) y.push_back(static_cast<int>(r % 3));

  model::PhaseObjective obj;
  obj.mode = model::PhaseObjective::Mode::kTransfer;
  obj.base = &base;
  obj.x = x;
  obj.labels = y;
  obj.lambda = 0.5;
  obj.tau = 2.0;
  obj.old_classes = 3;
  obj.teacher_probs = model::teacher_tempered_probs(teacher, x, 2.0, 3);

  auto t = TransferParams::identity_for(base);
  // move off the identity so second-order structure is exercised
  auto rng = make_rng(64);
  std::normal_distribution<double> noise(0.0, 0.2);
  for (auto& l : t.layers) {
    for (Index r = 0; r < l.scale.size(); ++r) l.scale[r] += noise(rng);
    for (Index r = 0; r < l.shift.size(); ++r) l.shift[r] += noise(rng);
  }
  FlatParams flat = model::flatten_transfer(t);
  auto vg = diffcore::value_and_grad(obj, flat);

  const double eps = 1e-5;
  double worst = 0.0;
  Vector probe = flat.values();
  for (Index i = 0; i < probe.size(); ++i) {
    probe[i] = flat[i] + eps;
    const double up = obj(probe);
    probe[i] = flat[i] - eps;
    const double down = obj(probe);
    probe[i] = flat[i];
    worst = std::max(worst, rel_err(vg.gradient[i], (up - down) / (2.0 * eps)));
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("checkpoint: bit-exact round trip") {
  auto p = random_mlp(3, 6, 4, 71);
  const auto path = std::filesystem::temp_directory_path() / "micl_ckpt_test.txt";
  model::save_checkpoint(p, path.string());
  auto loaded = model::load_checkpoint(path.string());
  REQUIRE(loaded.layers.size() == p.layers.size());
  CHECK(loaded.activation == p.activation);
  for (std::size_t q = 0; q < p.layers.size(); ++q) {
    CHECK(loaded.layers[q].W == p.layers[q].W);  // exact, not approximate
    CHECK(loaded.layers[q].b == p.layers[q].b);
  }
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint: malformed file reports the line") {
  const auto path = std::filesystem::temp_directory_path() / "micl_ckpt_bad.txt";
  {
    std::ofstream f(path);
    f << "micl-model 1\nactivation tanh\nlayers 1\nlayer0.W 1 2\n0.5 oops\n";
  }
  CHECK_THROWS_AS(model::load_checkpoint(path.string()), ParseError);
  std::filesystem::remove(path);
}
