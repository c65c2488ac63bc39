#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "micl/diffcore.hpp"
#include "micl/errors.hpp"
#include "micl/flat_params.hpp"
#include "micl/types.hpp"

namespace micl::model {

enum class Activation { kTanh, kIdentity };

// Small dense classifier: logits(x) = W_Q a(... a(W_1 x + b_1) ...) + b_Q.
// Rows of each W are output neurons; the last layer has one row per class.
struct ClassifierParams {
  struct Layer {
    Matrix W;  // out x in
    Vector b;  // out
  };
  std::vector<Layer> layers;
  Activation activation = Activation::kTanh;

  Index num_classes() const { return layers.empty() ? 0 : layers.back().W.rows(); }
  Index input_width() const { return layers.empty() ? 0 : layers.front().W.cols(); }
  void validate() const;
};

// Per-layer scaling (one scalar per output neuron) and shifting (per bias).
struct TransferParams {
  struct Layer {
    Vector scale;  // like rows of W
    Vector shift;  // like b
  };
  std::vector<Layer> layers;

  static TransferParams identity_for(const ClassifierParams& base);
};

struct LossWeights {
  double lambda = 0.5;
  double temperature = 2.0;

  void validate() const {
    if (!(lambda >= 0.0 && lambda <= 1.0))
      throw ArgumentError("lambda must be in [0,1], got " + std::to_string(lambda));
    if (!(temperature >= 1.0))
      throw ArgumentError("temperature must be >= 1, got " + std::to_string(temperature));
  }
};

// ---- templated forward / loss core ----------------------------------------

template <class Scalar>
struct LayersOf {
  std::vector<MatX<Scalar>> W;
  std::vector<VecX<Scalar>> b;
};

template <class Scalar>
LayersOf<Scalar> constant_layers(const ClassifierParams& p) {
  LayersOf<Scalar> out;
  for (const auto& l : p.layers) {
    out.W.push_back(l.W.template cast<Scalar>());
    out.b.push_back(l.b.template cast<Scalar>());
  }
  return out;
}

template <class Scalar>
MatX<Scalar> forward_layers(const LayersOf<Scalar>& layers, Activation act,
                            const MatX<Scalar>& x) {
  using std::tanh;
  MatX<Scalar> h = x;  // rows = samples
  for (std::size_t q = 0; q < layers.W.size(); ++q) {
    if (h.cols() != layers.W[q].cols())
      throw ShapeError("forward: input width " + std::to_string(h.cols()) +
                       " does not match layer " + std::to_string(q) + " (expects " +
                       std::to_string(layers.W[q].cols()) + ")");
    MatX<Scalar> z = h * layers.W[q].transpose();
    z.rowwise() += layers.b[q].transpose();
    if (q + 1 < layers.W.size() && act == Activation::kTanh) {
      for (Index c = 0; c < z.cols(); ++c)
        for (Index r = 0; r < z.rows(); ++r) z(r, c) = tanh(z(r, c));
    }
    h = std::move(z);
  }
  return h;
}

// log-softmax of one logit row at temperature tau, max-subtracted.
template <class Scalar>
VecX<Scalar> log_tempered_softmax_row(const VecX<Scalar>& logits, double tau) {
  using std::exp;
  using std::log;
  VecX<Scalar> u(logits.size());
  Scalar mx = logits[0];
  for (Index k = 1; k < logits.size(); ++k)
    if (logits[k] > mx) mx = logits[k];
  const Scalar inv_tau = Scalar(1.0 / tau);
  Scalar sum = Scalar(0);
  for (Index k = 0; k < logits.size(); ++k) {
    u[k] = (logits[k] - mx) * inv_tau;
    sum += exp(u[k]);
  }
  const Scalar lse = log(sum);
  for (Index k = 0; k < u.size(); ++k) u[k] = u[k] - lse;
  return u;
}

// Mean softmax cross-entropy over the batch; labels index logit columns.
template <class Scalar>
Scalar cross_entropy_mean(const MatX<Scalar>& logits, const std::vector<int>& labels) {
  if (static_cast<Index>(labels.size()) != logits.rows())
    throw ShapeError("cross_entropy: label count does not match batch");
  Scalar total = Scalar(0);
  for (Index r = 0; r < logits.rows(); ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= logits.cols())
      throw LabelError("label " + std::to_string(y) + " out of range [0," +
                       std::to_string(logits.cols()) + ")");
    VecX<Scalar> row = logits.row(r).transpose();
    VecX<Scalar> lp = log_tempered_softmax_row(row, 1.0);
    total += -lp[y];
  }
  return total / Scalar(static_cast<double>(logits.rows()));
}

// Mean distillation term: -sum_k teacher_prob_k * student_logprob_k over the
// first old_classes columns, both sides tempered. teacher_probs are fixed.
template <class Scalar>
Scalar distillation_mean(const MatX<Scalar>& student_logits, const Matrix& teacher_probs,
                         double tau, Index old_classes) {
  if (old_classes > student_logits.cols())
    throw ShapeError("distillation: old-class count exceeds student output width");
  if (teacher_probs.cols() != old_classes || teacher_probs.rows() != student_logits.rows())
    throw ShapeError("distillation: teacher probability shape mismatch");
  Scalar total = Scalar(0);
  for (Index r = 0; r < student_logits.rows(); ++r) {
    VecX<Scalar> row(old_classes);
    for (Index k = 0; k < old_classes; ++k) row[k] = student_logits(r, k);
    VecX<Scalar> lp = log_tempered_softmax_row(row, tau);
    for (Index k = 0; k < old_classes; ++k) total += Scalar(-teacher_probs(r, k)) * lp[k];
  }
  return total / Scalar(static_cast<double>(student_logits.rows()));
}

// ---- flat parameterizations ------------------------------------------------

struct ModelDims {
  std::vector<std::pair<Index, Index>> layer_shapes;  // (out, in) per layer
  Activation activation = Activation::kTanh;

  static ModelDims of(const ClassifierParams& p) {
    ModelDims d;
    d.activation = p.activation;
    for (const auto& l : p.layers) d.layer_shapes.emplace_back(l.W.rows(), l.W.cols());
    return d;
  }
};

FlatParams flatten(const ClassifierParams& p);
ClassifierParams unflatten(const ModelDims& dims, const FlatParams& flat);
FlatParams flatten_transfer(const TransferParams& t);
TransferParams unflatten_transfer(const ModelDims& dims, const FlatParams& flat);

template <class Scalar>
LayersOf<Scalar> layers_from_flat(const ModelDims& dims, const VecX<Scalar>& flat) {
  LayersOf<Scalar> out;
  Index off = 0;
  for (auto [rows, cols] : dims.layer_shapes) {
    MatX<Scalar> W(rows, cols);
    for (Index r = 0; r < rows; ++r)
      for (Index c = 0; c < cols; ++c) W(r, c) = flat[off++];
    VecX<Scalar> b(rows);
    for (Index r = 0; r < rows; ++r) b[r] = flat[off++];
    out.W.push_back(std::move(W));
    out.b.push_back(std::move(b));
  }
  return out;
}

// Effective layers under weight transfer: W_q scaled per output row, b_q
// shifted. `free_head_rows` marks how many trailing rows of the last layer
// are free parameters appended after the transfer blocks (new-class head
// rows trained directly; 0 reproduces the pure transfer parameterization).
template <class Scalar>
LayersOf<Scalar> transfer_layers_from_flat(const ClassifierParams& base,
                                           const VecX<Scalar>& flat, Index free_head_rows = 0) {
  LayersOf<Scalar> out = constant_layers<Scalar>(base);
  Index off = 0;
  const std::size_t last = out.W.size() - 1;
  for (std::size_t q = 0; q < out.W.size(); ++q) {
    const Index fixed_rows = (q == last) ? out.W[q].rows() - free_head_rows : out.W[q].rows();
    for (Index r = 0; r < fixed_rows; ++r) {
      const Scalar s = flat[off++];
      for (Index c = 0; c < out.W[q].cols(); ++c) out.W[q](r, c) = out.W[q](r, c) * s;
    }
    for (Index r = 0; r < fixed_rows; ++r) out.b[q][r] = out.b[q][r] + flat[off++];
  }
  for (Index r = out.W[last].rows() - free_head_rows; r < out.W[last].rows(); ++r) {
    for (Index c = 0; c < out.W[last].cols(); ++c) out.W[last](r, c) = flat[off++];
    out.b[last][r] = flat[off++];
  }
  return out;
}

// ---- concrete (double) operations -----------------------------------------

Matrix forward(const ClassifierParams& base, const std::optional<TransferParams>& transfer,
               const Matrix& x);
ClassifierParams apply_transfer(const ClassifierParams& base, const TransferParams& transfer);
Vector tempered_softmax(const Vector& logits, double tau);
double classification_loss(const ClassifierParams& params, const Matrix& x,
                           const std::vector<int>& labels);
double distillation_loss(const ClassifierParams& current, const ClassifierParams& previous,
                         const Matrix& x, double tau, Index old_classes);
double combined_loss(const ClassifierParams& current, const ClassifierParams& previous,
                     const Matrix& x, const std::vector<int>& labels, const LossWeights& weights,
                     Index old_classes);

// Teacher side of the distillation term, fixed during a phase.
Matrix teacher_tempered_probs(const ClassifierParams& previous, const Matrix& x, double tau,
                              Index old_classes);

// Generic objective used by the training loops and the gradient checks:
// combined loss as a function of a flat parameter vector. Exactly one
// parameterization is active, chosen by `mode`.
struct PhaseObjective {
  enum class Mode { kDirect, kTransfer, kTransferFreeHead };

  Mode mode = Mode::kDirect;
  ModelDims dims;                    // kDirect
  const ClassifierParams* base = nullptr;  // kTransfer*: frozen base weights
  Index free_head_rows = 0;
  Matrix x;
  std::vector<int> labels;
  double lambda = 1.0;  // weight on the classification term
  double tau = 2.0;
  Matrix teacher_probs;  // empty => classification only
  Index old_classes = 0;

  template <class Scalar>
  Scalar operator()(const VecX<Scalar>& flat) const {
    LayersOf<Scalar> layers;
    Activation act;
    if (mode == Mode::kDirect) {
      layers = layers_from_flat<Scalar>(dims, flat);
      act = dims.activation;
    } else {
      layers = transfer_layers_from_flat<Scalar>(*base, flat,
                                                 mode == Mode::kTransferFreeHead ? free_head_rows : 0);
      act = base->activation;
    }
    MatX<Scalar> xb = x.template cast<Scalar>();
    MatX<Scalar> logits = forward_layers(layers, act, xb);
    Scalar loss = Scalar(0);
    if (lambda > 0.0) loss += Scalar(lambda) * cross_entropy_mean(logits, labels);
    if (teacher_probs.size() > 0 && lambda < 1.0)
      loss += Scalar(1.0 - lambda) * distillation_mean(logits, teacher_probs, tau, old_classes);
    return loss;
  }
};

struct UpdateResult {
  TransferParams transfer;
  std::vector<double> loss_trace;  // loss before each step, then final
};

// Eq.-style transfer training: `epochs` full-batch descent steps on the
// combined loss with the base frozen; returns the trained transfer params.
UpdateResult model_level_update(const ClassifierParams& base, const TransferParams& transfer,
                                const ClassifierParams& previous, const Matrix& x,
                                const std::vector<int>& labels, const LossWeights& weights,
                                double lr, int epochs);

struct DirectUpdateResult {
  ClassifierParams params;
  std::vector<double> loss_trace;
};

// Standard over-writing mode: descend on the full parameter vector. An empty
// `previous` trains with classification loss only.
DirectUpdateResult update_model_direct(const ClassifierParams& params,
                                       const ClassifierParams* previous, const Matrix& x,
                                       const std::vector<int>& labels, const LossWeights& weights,
                                       double lr, int epochs);

// Appends `extra` output rows to the last layer, Gaussian-initialized.
ClassifierParams grow_head(const ClassifierParams& params, Index extra, double std_dev,
                           std::uint64_t seed);

ClassifierParams random_init(const std::vector<Index>& widths, Activation act, double std_dev,
                             std::uint64_t seed);

// Activations of the layer before the classifier head (the inputs themselves
// for a single-layer model).
Matrix penultimate_features(const ClassifierParams& params, const Matrix& x);

// Checkpoint text format: name -> shape -> row-major values, bit-exact
// round trip (shortest round-trip decimal rendering).
void save_checkpoint(const ClassifierParams& params, const std::string& path);
ClassifierParams load_checkpoint(const std::string& path);

double safe_log(double p);

}  // namespace micl::model
