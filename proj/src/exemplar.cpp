#include "micl/exemplar.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>

#include "micl/diffcore.hpp"
#include "micl/rng.hpp"
#include "micl/text.hpp"

namespace micl::exemplar {

Index ExemplarSet::feature_width() const {
  return per_class.empty() ? 0 : per_class.begin()->second.cols();
}

Index ExemplarSet::total_rows() const {
  Index n = 0;
  for (const auto& [c, m] : per_class) n += m.rows();
  return n;
}

void ExemplarSet::validate() const {
  const Index width = feature_width();
  for (const auto& [c, m] : per_class) {
    if (m.rows() < 1)
      throw ShapeError("exemplar set: class " + std::to_string(c) + " has no exemplars");
    if (m.cols() != width)
      throw ShapeError("exemplar set: class " + std::to_string(c) + " width mismatch");
    auto it = init_snapshot.find(c);
    if (it == init_snapshot.end() || it->second.rows() != m.rows() ||
        it->second.cols() != m.cols())
      throw ShapeError("exemplar set: class " + std::to_string(c) +
                       " snapshot shape does not match");
  }
}

void ExemplarHyperparams::validate() const {
  // zero is allowed: a no-op optimization that still records its trace
  if (outer_lr_new < 0.0 || outer_lr_old < 0.0)
    throw ArgumentError("exemplar outer learning rates must be non-negative");
  if (outer_epochs < 0) throw ArgumentError("outer_epochs must be >= 0");
  if (num_splits < 2) throw ArgumentError("num_splits must be >= 2");
  if (lr_halving_period < 1) throw ArgumentError("lr_halving_period must be >= 1");
  if (unroll.steps < 0 || !(unroll.inner_lr > 0.0))
    throw ArgumentError("invalid unroll spec");
}

Matrix select_random(const Matrix& class_data, Index m, std::uint64_t seed) {
  if (m < 1 || m > class_data.rows())
    throw ArgumentError("select_random: m=" + std::to_string(m) + " out of range [1," +
                        std::to_string(class_data.rows()) + "]");
  auto idx = sample_without_replacement(class_data.rows(), m, seed);
  Matrix out(m, class_data.cols());
  for (Index i = 0; i < m; ++i) out.row(i) = class_data.row(idx[static_cast<std::size_t>(i)]);
  return out;
}

std::vector<long> select_herding(const Matrix& class_features, Index m) {
  const Index n = class_features.rows();
  if (m < 1 || m > n)
    throw ArgumentError("select_herding: m=" + std::to_string(m) + " out of range [1," +
                        std::to_string(n) + "]");
  const Vector mu = class_features.colwise().mean();
  std::vector<long> picked;
  std::vector<bool> used(static_cast<std::size_t>(n), false);
  Vector sum = Vector::Zero(class_features.cols());
  for (Index k = 0; k < m; ++k) {
    long best = -1;
    double best_dist = std::numeric_limits<double>::infinity();
    for (Index i = 0; i < n; ++i) {
      if (used[static_cast<std::size_t>(i)]) continue;
      const Vector cand_mean =
          (sum + class_features.row(i).transpose()) / static_cast<double>(k + 1);
      const double d = (mu - cand_mean).norm();
      if (d < best_dist) {
        best_dist = d;
        best = i;
      }
    }
    used[static_cast<std::size_t>(best)] = true;
    picked.push_back(best);
    sum += class_features.row(best).transpose();
  }
  return picked;
}

namespace {

double mean_row_distance(const Matrix& a, const Matrix& b) {
  double total = 0.0;
  for (Index r = 0; r < a.rows(); ++r) total += (a.row(r) - b.row(r)).norm();
  return a.rows() > 0 ? total / static_cast<double>(a.rows()) : 0.0;
}

// Inner objective of the local bilevel program: classification loss of the
// model on the exemplar rows themselves.
struct InnerObjective {
  model::ModelDims dims;
  std::vector<int> labels;

  template <class ThetaVec, class ExMat>
  auto operator()(const ThetaVec& theta, const ExMat& exemplars) const {
    using Scalar = std::decay_t<decltype(theta[0])>;
    auto layers = model::layers_from_flat<Scalar>(dims, theta);
    MatX<Scalar> logits = model::forward_layers<Scalar>(layers, dims.activation, exemplars);
    return model::cross_entropy_mean(logits, labels);
  }
};

// Validation objective: classification loss of the unrolled model on fixed
// data (the exemplars enter only through the inner loop).
struct OuterObjective {
  model::ModelDims dims;
  Matrix x;
  std::vector<int> labels;

  template <class ThetaVec, class ExMat>
  auto operator()(const ThetaVec& theta, const ExMat&) const {
    using Scalar = std::decay_t<decltype(theta[0])>;
    auto layers = model::layers_from_flat<Scalar>(dims, theta);
    MatX<Scalar> logits =
        model::forward_layers(layers, dims.activation, MatX<Scalar>(x.template cast<Scalar>()));
    return model::cross_entropy_mean(logits, labels);
  }
};

void clip_rows(Matrix& m, const std::pair<double, double>& range) {
  for (Index c = 0; c < m.cols(); ++c)
    for (Index r = 0; r < m.rows(); ++r)
      m(r, c) = std::min(std::max(m(r, c), range.first), range.second);
}

}  // namespace

OptimizeResult optimize_exemplars(const Matrix& init_exemplars,
                                  const std::vector<int>& exemplar_labels, const Matrix& val_x,
                                  const std::vector<int>& val_labels,
                                  const model::ClassifierParams& anchor, double outer_lr,
                                  const ExemplarHyperparams& hp, const Matrix* drift_reference) {
  hp.validate();
  if (static_cast<Index>(exemplar_labels.size()) != init_exemplars.rows())
    throw ShapeError("optimize_exemplars: label count does not match exemplar rows");

  const model::ModelDims dims = model::ModelDims::of(anchor);
  InnerObjective inner{dims, exemplar_labels};
  OuterObjective outer{dims, val_x, val_labels};
  const FlatParams theta0 = model::flatten(anchor);
  const Matrix& ref = drift_reference ? *drift_reference : init_exemplars;

  Matrix ex = init_exemplars;
  OptimizeResult out;
  for (int e = 0; e < hp.outer_epochs; ++e) {
    diffcore::HypergradResult hg;
    try {
      hg = diffcore::unrolled_hypergradient(inner, outer, theta0, ex, hp.unroll);
    } catch (const DivergenceError& err) {
      throw DivergenceError(std::string(err.what()) + " (outer epoch)", e);
    }
    out.trace.outer_loss.push_back(hg.outer_value);
    out.trace.drift_euclid.push_back(mean_row_distance(ex, ref));

    const double lr = outer_lr * std::pow(0.5, e / hp.lr_halving_period);
    Matrix candidate = ex - lr * hg.exemplar_grad;
    if (hp.clip) clip_rows(candidate, *hp.clip);
    if (hp.backtracking && lr > 0.0) {
      double cand_loss =
          diffcore::unrolled_outer_value(inner, outer, theta0, candidate, hp.unroll);
      if (cand_loss > hg.outer_value) {
        candidate = ex - 0.5 * lr * hg.exemplar_grad;
        if (hp.clip) clip_rows(candidate, *hp.clip);
        cand_loss = diffcore::unrolled_outer_value(inner, outer, theta0, candidate, hp.unroll);
        if (cand_loss > hg.outer_value) candidate = ex;  // reject the step
      }
    }
    ex = std::move(candidate);
  }
  out.trace.outer_loss.push_back(
      diffcore::unrolled_outer_value(inner, outer, theta0, ex, hp.unroll));
  out.trace.drift_euclid.push_back(mean_row_distance(ex, ref));
  out.exemplars = std::move(ex);
  return out;
}

std::pair<Matrix, std::vector<int>> stack_classes(const std::map<int, Matrix>& per_class) {
  Index rows = 0;
  Index width = 0;
  for (const auto& [c, m] : per_class) {
    rows += m.rows();
    width = m.cols();
  }
  Matrix stacked(rows, width);
  std::vector<int> classes;
  classes.reserve(static_cast<std::size_t>(rows));
  Index at = 0;
  for (const auto& [c, m] : per_class) {
    stacked.middleRows(at, m.rows()) = m;
    for (Index r = 0; r < m.rows(); ++r) classes.push_back(c);
    at += m.rows();
  }
  return {std::move(stacked), std::move(classes)};
}

namespace {

std::vector<int> to_head_labels(const std::vector<int>& class_ids,
                                const std::map<int, int>& head_of) {
  std::vector<int> out;
  out.reserve(class_ids.size());
  for (int c : class_ids) {
    auto it = head_of.find(c);
    if (it == head_of.end())
      throw LabelError("class " + std::to_string(c) + " has no head index");
    out.push_back(it->second);
  }
  return out;
}

}  // namespace

MnemonicsResult train_mnemonics(const std::map<int, Matrix>& init,
                                const std::map<int, int>& head_of, const Matrix& new_x,
                                const std::vector<int>& new_labels_head,
                                const model::ClassifierParams& anchor,
                                const ExemplarHyperparams& hp) {
  auto [stacked, class_ids] = stack_classes(init);
  auto labels = to_head_labels(class_ids, head_of);
  OptimizeResult opt = optimize_exemplars(stacked, labels, new_x, new_labels_head, anchor,
                                          hp.outer_lr_new, hp, nullptr);

  MnemonicsResult out;
  out.trace = std::move(opt.trace);
  Index at = 0;
  for (const auto& [c, m] : init) {
    out.exemplars[c] = opt.exemplars.middleRows(at, m.rows());
    at += m.rows();
  }
  return out;
}

std::vector<std::vector<std::pair<int, Index>>> stratified_partition(
    const std::map<int, Matrix>& per_class, int num_splits, std::uint64_t seed) {
  std::vector<std::vector<std::pair<int, Index>>> groups(static_cast<std::size_t>(num_splits));
  for (const auto& [c, m] : per_class) {
    if (m.rows() < num_splits) continue;
    auto order = shuffled_indices(m.rows(), mix_seed(seed, static_cast<std::uint64_t>(c)));
    for (std::size_t i = 0; i < order.size(); ++i)
      groups[i % static_cast<std::size_t>(num_splits)].emplace_back(c, order[i]);
  }
  return groups;
}

ExemplarSet adjust_old_exemplars(const ExemplarSet& old_set, const std::map<int, int>& head_of,
                                 const model::ClassifierParams& anchor,
                                 const ExemplarHyperparams& hp, std::uint64_t seed) {
  hp.validate();
  old_set.validate();
  ExemplarSet adjusted = old_set;

  for (const auto& [c, m] : old_set.per_class)
    if (m.rows() < hp.num_splits)
      std::cerr << "[micl] warning: class " << c << " has " << m.rows()
                << " exemplars (< num_splits=" << hp.num_splits << "); skipping adjustment\n";

  auto group_rows = stratified_partition(old_set.per_class, hp.num_splits, seed);

  for (int g = 0; g < hp.num_splits; ++g) {
    const auto& rows = group_rows[static_cast<std::size_t>(g)];
    if (rows.empty()) continue;

    Matrix subset(static_cast<Index>(rows.size()), adjusted.feature_width());
    std::vector<int> subset_classes;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      subset.row(static_cast<Index>(i)) = adjusted.per_class.at(rows[i].first).row(rows[i].second);
      subset_classes.push_back(rows[i].first);
    }

    // Validation set: every exemplar outside this subset, current state.
    Index val_rows = 0;
    for (int h = 0; h < hp.num_splits; ++h)
      if (h != g) val_rows += static_cast<Index>(group_rows[static_cast<std::size_t>(h)].size());
    Matrix val_x(val_rows, adjusted.feature_width());
    std::vector<int> val_classes;
    Index at = 0;
    for (int h = 0; h < hp.num_splits; ++h) {
      if (h == g) continue;
      for (const auto& [c, r] : group_rows[static_cast<std::size_t>(h)]) {
        val_x.row(at++) = adjusted.per_class.at(c).row(r);
        val_classes.push_back(c);
      }
    }
    if (val_rows == 0) continue;

    auto subset_labels = to_head_labels(subset_classes, head_of);
    auto val_labels = to_head_labels(val_classes, head_of);
    OptimizeResult opt = optimize_exemplars(subset, subset_labels, val_x, val_labels, anchor,
                                            hp.outer_lr_old, hp, nullptr);
    for (std::size_t i = 0; i < rows.size(); ++i)
      adjusted.per_class.at(rows[i].first).row(rows[i].second) =
          opt.exemplars.row(static_cast<Index>(i));
  }
  return adjusted;
}

FineTuneResult fine_tune_balanced(const model::ClassifierParams& params, const ExemplarSet& set,
                                  const std::map<int, int>& head_of, double lr, int epochs) {
  set.validate();
  Index count = -1;
  std::string offenders;
  for (const auto& [c, m] : set.per_class) {
    if (count < 0) count = m.rows();
    if (m.rows() != count) offenders += (offenders.empty() ? "" : ", ") + std::to_string(c);
  }
  if (!offenders.empty())
    throw BalanceError("fine_tune_balanced: unequal exemplar counts (classes " + offenders + ")");

  auto [x, class_ids] = stack_classes(set.per_class);
  auto labels = to_head_labels(class_ids, head_of);
  auto res = model::update_model_direct(params, nullptr, x, labels, model::LossWeights{}, lr,
                                        epochs);
  return FineTuneResult{std::move(res.params), std::move(res.loss_trace)};
}

void save_exemplars_csv(const ExemplarSet& set, const std::string& path) {
  set.validate();
  std::ofstream out(path);
  if (!out) throw IoError("cannot open exemplar dump for writing: " + path);
  out << "class,role,index";
  for (Index f = 0; f < set.feature_width(); ++f) out << ",f" << f;
  out << "\n";
  auto emit = [&](const std::map<int, Matrix>& rows, const char* role) {
    for (const auto& [c, m] : rows)
      for (Index r = 0; r < m.rows(); ++r) {
        out << c << "," << role << "," << r;
        for (Index f = 0; f < m.cols(); ++f) out << "," << format_double(m(r, f));
        out << "\n";
      }
  };
  emit(set.per_class, "exemplar");
  emit(set.init_snapshot, "exemplar-init");
  if (!out) throw IoError("exemplar dump write failed: " + path);
}

ExemplarSet load_exemplars_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open exemplar dump: " + path);
  std::string line;
  long lineno = 0;
  if (!std::getline(in, line)) throw ParseError("empty exemplar dump", 0);
  ++lineno;

  std::map<int, std::vector<Vector>> current, init;
  Index width = -1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::string field;
    std::istringstream row(line);
    while (std::getline(row, field, ',')) fields.push_back(field);
    if (fields.size() < 4) throw ParseError("expected class,role,index,features", lineno);
    const int c = static_cast<int>(parse_long(fields[0], lineno));
    const Index w = static_cast<Index>(fields.size()) - 3;
    if (width < 0) width = w;
    if (w != width) throw ParseError("inconsistent feature width", lineno);
    Vector v(w);
    for (Index f = 0; f < w; ++f) v[f] = parse_double(fields[static_cast<std::size_t>(f) + 3], lineno);
    if (fields[1] == "exemplar")
      current[c].push_back(std::move(v));
    else if (fields[1] == "exemplar-init")
      init[c].push_back(std::move(v));
    else
      throw ParseError("unknown role '" + fields[1] + "'", lineno);
  }

  ExemplarSet set;
  auto pack = [&](const std::map<int, std::vector<Vector>>& src, std::map<int, Matrix>& dst) {
    for (const auto& [c, rows] : src) {
      Matrix m(static_cast<Index>(rows.size()), width);
      for (std::size_t r = 0; r < rows.size(); ++r) m.row(static_cast<Index>(r)) = rows[r];
      dst[c] = std::move(m);
    }
  };
  pack(current, set.per_class);
  pack(init, set.init_snapshot);
  set.validate();
  return set;
}

std::map<int, DriftPair> exemplar_drift(const ExemplarSet& set) {
  set.validate();
  std::map<int, DriftPair> out;
  for (const auto& [c, cur] : set.per_class) {
    const Matrix& ref = set.init_snapshot.at(c);
    DriftPair d;
    for (Index r = 0; r < cur.rows(); ++r) {
      d.euclidean += (cur.row(r) - ref.row(r)).norm();
      const double na = cur.row(r).norm();
      const double nb = ref.row(r).norm();
      if (na == 0.0 && nb == 0.0)
        d.cosine += 0.0;
      else if (na == 0.0 || nb == 0.0)
        d.cosine += 1.0;
      else
        d.cosine += 1.0 - cur.row(r).dot(ref.row(r)) / (na * nb);
    }
    d.euclidean /= static_cast<double>(cur.rows());
    d.cosine /= static_cast<double>(cur.rows());
    out[c] = d;
  }
  return out;
}

}  // namespace micl::exemplar
