#include "micl/model.hpp"

#include <fstream>
#include <random>
#include <sstream>

#include "micl/rng.hpp"
#include "micl/text.hpp"

namespace micl::model {

void ClassifierParams::validate() const {
  if (layers.empty()) throw ShapeError("classifier has no layers");
  for (std::size_t q = 0; q < layers.size(); ++q) {
    if (layers[q].W.rows() != layers[q].b.size())
      throw ShapeError("layer " + std::to_string(q) + ": bias length does not match rows");
    if (q > 0 && layers[q].W.cols() != layers[q - 1].W.rows())
      throw ShapeError("layer " + std::to_string(q) + ": input width " +
                       std::to_string(layers[q].W.cols()) + " does not compose with layer " +
                       std::to_string(q - 1) + " output " + std::to_string(layers[q - 1].W.rows()));
  }
}

TransferParams TransferParams::identity_for(const ClassifierParams& base) {
  TransferParams t;
  for (const auto& l : base.layers)
    t.layers.push_back({Vector::Ones(l.W.rows()), Vector::Zero(l.b.size())});
  return t;
}

double safe_log(double p) { return std::log(p < 1e-300 ? 1e-300 : p); }

FlatParams flatten(const ClassifierParams& p) {
  auto layout = std::make_shared<FlatLayout>();
  Index total = 0;
  for (std::size_t q = 0; q < p.layers.size(); ++q) {
    layout->add("layer" + std::to_string(q) + ".W", {p.layers[q].W.rows(), p.layers[q].W.cols()});
    layout->add("layer" + std::to_string(q) + ".b", {p.layers[q].b.size()});
    total += p.layers[q].W.size() + p.layers[q].b.size();
  }
  Vector values(total);
  Index off = 0;
  for (const auto& l : p.layers) {
    for (Index r = 0; r < l.W.rows(); ++r)
      for (Index c = 0; c < l.W.cols(); ++c) values[off++] = l.W(r, c);
    for (Index r = 0; r < l.b.size(); ++r) values[off++] = l.b[r];
  }
  return FlatParams(std::move(layout), std::move(values));
}

ClassifierParams unflatten(const ModelDims& dims, const FlatParams& flat) {
  ClassifierParams p;
  p.activation = dims.activation;
  Index off = 0;
  for (auto [rows, cols] : dims.layer_shapes) {
    ClassifierParams::Layer l;
    l.W.resize(rows, cols);
    for (Index r = 0; r < rows; ++r)
      for (Index c = 0; c < cols; ++c) l.W(r, c) = flat[off++];
    l.b.resize(rows);
    for (Index r = 0; r < rows; ++r) l.b[r] = flat[off++];
    p.layers.push_back(std::move(l));
  }
  return p;
}

FlatParams flatten_transfer(const TransferParams& t) {
  auto layout = std::make_shared<FlatLayout>();
  Index total = 0;
  for (std::size_t q = 0; q < t.layers.size(); ++q) {
    layout->add("layer" + std::to_string(q) + ".scale", {t.layers[q].scale.size()});
    layout->add("layer" + std::to_string(q) + ".shift", {t.layers[q].shift.size()});
    total += t.layers[q].scale.size() + t.layers[q].shift.size();
  }
  Vector values(total);
  Index off = 0;
  for (const auto& l : t.layers) {
    for (Index r = 0; r < l.scale.size(); ++r) values[off++] = l.scale[r];
    for (Index r = 0; r < l.shift.size(); ++r) values[off++] = l.shift[r];
  }
  return FlatParams(std::move(layout), std::move(values));
}

TransferParams unflatten_transfer(const ModelDims& dims, const FlatParams& flat) {
  TransferParams t;
  Index off = 0;
  for (auto [rows, cols] : dims.layer_shapes) {
    (void)cols;
    TransferParams::Layer l;
    l.scale.resize(rows);
    for (Index r = 0; r < rows; ++r) l.scale[r] = flat[off++];
    l.shift.resize(rows);
    for (Index r = 0; r < rows; ++r) l.shift[r] = flat[off++];
    t.layers.push_back(std::move(l));
  }
  return t;
}

Matrix forward(const ClassifierParams& base, const std::optional<TransferParams>& transfer,
               const Matrix& x) {
  if (x.cols() != base.input_width())
    throw ShapeError("forward: batch width " + std::to_string(x.cols()) +
                     " does not match layer 0 (expects " + std::to_string(base.input_width()) +
                     ")");
  if (!transfer) {
    auto layers = constant_layers<double>(base);
    return forward_layers<double>(layers, base.activation, x);
  }
  if (transfer->layers.size() != base.layers.size())
    throw ShapeError("forward: transfer layer count does not match base");
  return forward(apply_transfer(base, *transfer), std::nullopt, x);
}

ClassifierParams apply_transfer(const ClassifierParams& base, const TransferParams& transfer) {
  if (transfer.layers.size() != base.layers.size())
    throw ShapeError("apply_transfer: layer count mismatch");
  ClassifierParams out = base;
  for (std::size_t q = 0; q < base.layers.size(); ++q) {
    const auto& t = transfer.layers[q];
    if (t.scale.size() != base.layers[q].W.rows() || t.shift.size() != base.layers[q].b.size())
      throw ShapeError("apply_transfer: shape mismatch at layer " + std::to_string(q));
    out.layers[q].W = t.scale.asDiagonal() * base.layers[q].W;
    out.layers[q].b = base.layers[q].b + t.shift;
  }
  return out;
}

Vector tempered_softmax(const Vector& logits, double tau) {
  if (!(tau >= 1.0)) throw ArgumentError("tempered_softmax: tau must be >= 1");
  VecX<double> lp = log_tempered_softmax_row<double>(logits, tau);
  Vector p(lp.size());
  for (Index k = 0; k < lp.size(); ++k) p[k] = std::exp(lp[k]);
  return p;
}

double classification_loss(const ClassifierParams& params, const Matrix& x,
                           const std::vector<int>& labels) {
  Matrix logits = forward(params, std::nullopt, x);
  return cross_entropy_mean<double>(logits, labels);
}

Matrix teacher_tempered_probs(const ClassifierParams& previous, const Matrix& x, double tau,
                              Index old_classes) {
  Matrix logits = forward(previous, std::nullopt, x);
  if (old_classes > logits.cols())
    throw ShapeError("teacher: old-class count " + std::to_string(old_classes) +
                     " exceeds teacher output width " + std::to_string(logits.cols()));
  Matrix probs(logits.rows(), old_classes);
  for (Index r = 0; r < logits.rows(); ++r) {
    Vector row = logits.row(r).head(old_classes).transpose();
    probs.row(r) = tempered_softmax(row, tau).transpose();
  }
  return probs;
}

double distillation_loss(const ClassifierParams& current, const ClassifierParams& previous,
                         const Matrix& x, double tau, Index old_classes) {
  if (old_classes > current.num_classes() || old_classes > previous.num_classes())
    throw ShapeError("distillation: old-class count exceeds an output width");
  Matrix teacher = teacher_tempered_probs(previous, x, tau, old_classes);
  Matrix logits = forward(current, std::nullopt, x);
  return distillation_mean<double>(logits, teacher, tau, old_classes);
}

double combined_loss(const ClassifierParams& current, const ClassifierParams& previous,
                     const Matrix& x, const std::vector<int>& labels, const LossWeights& weights,
                     Index old_classes) {
  weights.validate();
  const double lc = classification_loss(current, x, labels);
  const double ld = distillation_loss(current, previous, x, weights.temperature, old_classes);
  return weights.lambda * lc + (1.0 - weights.lambda) * ld;
}

namespace {

void check_step_magnitude(const Vector& values, int epoch) {
  for (Index i = 0; i < values.size(); ++i)
    if (!std::isfinite(values[i]) || std::abs(values[i]) > diffcore::kDivergenceGuard)
      throw DivergenceError("model parameters diverged", epoch);
}

}  // namespace

UpdateResult model_level_update(const ClassifierParams& base, const TransferParams& transfer,
                                const ClassifierParams& previous, const Matrix& x,
                                const std::vector<int>& labels, const LossWeights& weights,
                                double lr, int epochs) {
  if (!(lr > 0.0)) throw ArgumentError("model_level_update: lr must be positive");
  weights.validate();

  PhaseObjective obj;
  obj.mode = PhaseObjective::Mode::kTransfer;
  obj.base = &base;
  obj.x = x;
  obj.labels = labels;
  obj.lambda = weights.lambda;
  obj.tau = weights.temperature;
  obj.old_classes = previous.num_classes();
  obj.teacher_probs = teacher_tempered_probs(previous, x, weights.temperature, obj.old_classes);

  FlatParams flat = flatten_transfer(transfer);
  UpdateResult out;
  out.transfer = transfer;
  for (int e = 0; e < epochs; ++e) {
    auto vg = diffcore::value_and_grad(obj, flat);
    out.loss_trace.push_back(vg.value);
    flat.values() -= lr * vg.gradient.values();
    check_step_magnitude(flat.values(), e);
  }
  out.loss_trace.push_back(obj(flat.values()));
  out.transfer = unflatten_transfer(ModelDims::of(base), flat);
  return out;
}

DirectUpdateResult update_model_direct(const ClassifierParams& params,
                                       const ClassifierParams* previous, const Matrix& x,
                                       const std::vector<int>& labels, const LossWeights& weights,
                                       double lr, int epochs) {
  if (!(lr > 0.0)) throw ArgumentError("update_model_direct: lr must be positive");

  PhaseObjective obj;
  obj.mode = PhaseObjective::Mode::kDirect;
  obj.dims = ModelDims::of(params);
  obj.x = x;
  obj.labels = labels;
  if (previous) {
    weights.validate();
    obj.lambda = weights.lambda;
    obj.tau = weights.temperature;
    obj.old_classes = previous->num_classes();
    obj.teacher_probs =
        teacher_tempered_probs(*previous, x, weights.temperature, obj.old_classes);
  } else {
    obj.lambda = 1.0;
  }

  FlatParams flat = flatten(params);
  DirectUpdateResult out;
  for (int e = 0; e < epochs; ++e) {
    auto vg = diffcore::value_and_grad(obj, flat);
    out.loss_trace.push_back(vg.value);
    flat.values() -= lr * vg.gradient.values();
    check_step_magnitude(flat.values(), e);
  }
  out.loss_trace.push_back(obj(flat.values()));
  out.params = unflatten(obj.dims, flat);
  return out;
}

ClassifierParams grow_head(const ClassifierParams& params, Index extra, double std_dev,
                           std::uint64_t seed) {
  if (extra < 0) throw ArgumentError("grow_head: extra must be non-negative");
  ClassifierParams out = params;
  auto& last = out.layers.back();
  const Index old_rows = last.W.rows();
  last.W.conservativeResize(old_rows + extra, Eigen::NoChange);
  last.b.conservativeResize(old_rows + extra);
  auto rng = make_rng(seed);
  std::normal_distribution<double> noise(0.0, std_dev);
  for (Index r = old_rows; r < last.W.rows(); ++r) {
    for (Index c = 0; c < last.W.cols(); ++c) last.W(r, c) = noise(rng);
    last.b[r] = noise(rng);
  }
  return out;
}

ClassifierParams random_init(const std::vector<Index>& widths, Activation act, double std_dev,
                             std::uint64_t seed) {
  if (widths.size() < 2) throw ArgumentError("random_init: need input and output widths");
  ClassifierParams p;
  p.activation = act;
  auto rng = make_rng(seed);
  std::normal_distribution<double> noise(0.0, std_dev);
  for (std::size_t q = 0; q + 1 < widths.size(); ++q) {
    ClassifierParams::Layer l;
    l.W.resize(widths[q + 1], widths[q]);
    for (Index r = 0; r < l.W.rows(); ++r)
      for (Index c = 0; c < l.W.cols(); ++c) l.W(r, c) = noise(rng);
    l.b = Vector::Zero(widths[q + 1]);
    p.layers.push_back(std::move(l));
  }
  return p;
}

Matrix penultimate_features(const ClassifierParams& params, const Matrix& x) {
  if (params.layers.size() <= 1) return x;
  ClassifierParams trunk;
  trunk.activation = params.activation;
  trunk.layers.assign(params.layers.begin(), params.layers.end() - 1);
  Matrix h = forward(trunk, std::nullopt, x);
  if (params.activation == Activation::kTanh)
    h = h.unaryExpr([](double v) { return std::tanh(v); });
  return h;
}

void save_checkpoint(const ClassifierParams& params, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  out << "micl-model 1\n";
  out << "activation " << (params.activation == Activation::kTanh ? "tanh" : "identity") << "\n";
  out << "layers " << params.layers.size() << "\n";
  for (std::size_t q = 0; q < params.layers.size(); ++q) {
    const auto& l = params.layers[q];
    out << "layer" << q << ".W " << l.W.rows() << " " << l.W.cols() << "\n";
    for (Index r = 0; r < l.W.rows(); ++r) {
      for (Index c = 0; c < l.W.cols(); ++c)
        out << (c ? " " : "") << format_double(l.W(r, c));
      out << "\n";
    }
    out << "layer" << q << ".b " << l.b.size() << "\n";
    for (Index r = 0; r < l.b.size(); ++r) out << (r ? " " : "") << format_double(l.b[r]);
    out << "\n";
  }
  if (!out) throw IoError("checkpoint write failed: " + path);
}

namespace {

std::vector<std::string> split_ws(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

}  // namespace

ClassifierParams load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  std::string line;
  long lineno = 0;
  auto next_line = [&]() {
    if (!std::getline(in, line)) throw ParseError("unexpected end of checkpoint", lineno);
    ++lineno;
    return split_ws(line);
  };

  auto header = next_line();
  if (header.size() != 2 || header[0] != "micl-model" || header[1] != "1")
    throw ParseError("not a micl-model v1 checkpoint", lineno);
  auto act_line = next_line();
  if (act_line.size() != 2 || act_line[0] != "activation")
    throw ParseError("expected activation line", lineno);
  ClassifierParams p;
  if (act_line[1] == "tanh")
    p.activation = Activation::kTanh;
  else if (act_line[1] == "identity")
    p.activation = Activation::kIdentity;
  else
    throw ParseError("unknown activation '" + act_line[1] + "'", lineno);
  auto layers_line = next_line();
  if (layers_line.size() != 2 || layers_line[0] != "layers")
    throw ParseError("expected layers line", lineno);
  const long num_layers = parse_long(layers_line[1], lineno);

  for (long q = 0; q < num_layers; ++q) {
    auto wh = next_line();
    if (wh.size() != 3) throw ParseError("expected 'layerN.W rows cols'", lineno);
    const long rows = parse_long(wh[1], lineno);
    const long cols = parse_long(wh[2], lineno);
    ClassifierParams::Layer l;
    l.W.resize(rows, cols);
    for (long r = 0; r < rows; ++r) {
      auto vals = next_line();
      if (static_cast<long>(vals.size()) != cols)
        throw ParseError("wrong number of weight columns", lineno);
      for (long c = 0; c < cols; ++c) l.W(r, c) = parse_double(vals[static_cast<std::size_t>(c)], lineno);
    }
    auto bh = next_line();
    if (bh.size() != 2) throw ParseError("expected 'layerN.b len'", lineno);
    const long blen = parse_long(bh[1], lineno);
    if (blen != rows) throw ParseError("bias length does not match weight rows", lineno);
    auto bvals = next_line();
    if (static_cast<long>(bvals.size()) != blen)
      throw ParseError("wrong number of bias values", lineno);
    l.b.resize(blen);
    for (long r = 0; r < blen; ++r) l.b[r] = parse_double(bvals[static_cast<std::size_t>(r)], lineno);
    p.layers.push_back(std::move(l));
  }
  p.validate();
  return p;
}

}  // namespace micl::model
