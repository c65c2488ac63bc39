#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "micl/model.hpp"
#include "micl/types.hpp"

namespace micl::exemplar {

enum class Origin { kRandom, kHerding, kMnemonics, kUpperBound };

// Per-class exemplar tensors plus the snapshot of their values at
// initialization (distance tracking). Snapshot rows stay aligned with
// exemplar rows through every adjustment and discard.
struct ExemplarSet {
  std::map<int, Matrix> per_class;      // class id -> m x width
  std::map<int, Matrix> init_snapshot;  // same keys and shapes
  Origin origin = Origin::kRandom;

  Index feature_width() const;
  Index total_rows() const;
  void validate() const;
};

struct ExemplarHyperparams {
  double outer_lr_new = 0.01;  // beta1
  double outer_lr_old = 0.01;  // beta2
  int outer_epochs = 50;
  int lr_halving_period = 10;
  int num_splits = 2;
  UnrollSpec unroll{5, 0.01};
  bool backtracking = false;
  std::optional<std::pair<double, double>> clip;  // optional value range

  void validate() const;
};

// m distinct rows, uniform without replacement, returned in ascending row
// order so that m == rows reproduces the input.
Matrix select_random(const Matrix& class_data, Index m, std::uint64_t seed);

// Greedy mean-matching selection: step k picks the index minimizing
// ||mu - mean(selected + candidate)||_2, exact ties to the lowest index.
std::vector<long> select_herding(const Matrix& class_features, Index m);

struct OptimizeTrace {
  std::vector<double> outer_loss;     // length outer_epochs + 1
  std::vector<double> drift_euclid;   // mean distance to the reference rows
};

struct OptimizeResult {
  Matrix exemplars;
  OptimizeTrace trace;
};

// Local bilevel loop shared by new-exemplar training and old-exemplar
// adjustment: per outer epoch, re-clone the temporary model from `anchor`,
// run K inner descent steps on the exemplars, back-propagate the validation
// loss through the unroll, and take one outer step (lr halved every
// lr_halving_period epochs).
OptimizeResult optimize_exemplars(const Matrix& init_exemplars,
                                  const std::vector<int>& exemplar_labels, const Matrix& val_x,
                                  const std::vector<int>& val_labels,
                                  const model::ClassifierParams& anchor, double outer_lr,
                                  const ExemplarHyperparams& hp, const Matrix* drift_reference);

struct MnemonicsResult {
  std::map<int, Matrix> exemplars;
  OptimizeTrace trace;
};

// Trains the new-class exemplars jointly against the new data as validation.
// `head_of` maps class id to logit index of `anchor`.
MnemonicsResult train_mnemonics(const std::map<int, Matrix>& init,
                                const std::map<int, int>& head_of, const Matrix& new_x,
                                const std::vector<int>& new_labels_head,
                                const model::ClassifierParams& anchor,
                                const ExemplarHyperparams& hp);

// Seeded stratified split: per class, shuffled rows dealt round-robin into
// num_splits groups (sizes differing by at most one). Classes with fewer
// rows than num_splits are left out entirely.
std::vector<std::vector<std::pair<int, Index>>> stratified_partition(
    const std::map<int, Matrix>& per_class, int num_splits, std::uint64_t seed);

// Seeded stratified partition of each class's rows into num_splits groups;
// subsets are optimized sequentially, each validated on the union of the
// others in their current state. Classes with fewer rows than num_splits are
// skipped with a warning on stderr.
ExemplarSet adjust_old_exemplars(const ExemplarSet& old_set, const std::map<int, int>& head_of,
                                 const model::ClassifierParams& anchor,
                                 const ExemplarHyperparams& hp, std::uint64_t seed);

struct FineTuneResult {
  model::ClassifierParams params;
  std::vector<double> loss_trace;
};

// Classification-only descent on the balanced exemplar union. Throws
// BalanceError naming the offending classes if counts differ.
FineTuneResult fine_tune_balanced(const model::ClassifierParams& params, const ExemplarSet& set,
                                  const std::map<int, int>& head_of, double lr, int epochs);

struct DriftPair {
  double cosine = 0.0;
  double euclidean = 0.0;
};

// Per-class mean (cosine, Euclidean) distance between current exemplars and
// their initialization snapshot.
std::map<int, DriftPair> exemplar_drift(const ExemplarSet& set);

// Row-stack of a per-class map in key order, with per-row class ids.
std::pair<Matrix, std::vector<int>> stack_classes(const std::map<int, Matrix>& per_class);

// Dump format consumed by the embedding-dump command: CSV with header
// `class,role,index,f0,...` and roles exemplar / exemplar-init. Values are
// shortest round-trip decimals (bit-exact reload).
void save_exemplars_csv(const ExemplarSet& set, const std::string& path);
ExemplarSet load_exemplars_csv(const std::string& path);

}  // namespace micl::exemplar
