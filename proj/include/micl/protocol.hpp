#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "micl/dataio.hpp"
#include "micl/exemplar.hpp"
#include "micl/model.hpp"
#include "micl/schedule.hpp"

namespace micl::protocol {

enum class Strategy { kRandom, kHerding, kMnemonics, kUpperBound };

std::string strategy_name(Strategy s);
Strategy strategy_from_name(const std::string& name);

struct ExperimentConfig {
  PhaseSchedule schedule;
  MemoryBudget budget;
  Strategy strategy = Strategy::kMnemonics;
  bool adjust_old = true;
  bool use_transfer = true;
  bool use_distillation = true;
  bool fine_tune = true;
  model::LossWeights loss;
  double model_lr = 0.1;
  int model_epochs = 80;
  double fine_tune_lr = 0.01;
  int fine_tune_epochs = 20;
  exemplar::ExemplarHyperparams exemplar_hp;
  Index hidden_units = 8;  // 0 = softmax regression
  double init_std = 0.3;
  double head_init_std = 0.01;
  std::uint64_t master_seed = 1;

  void validate() const;
};

struct DriftRecord {
  int class_id = 0;
  double cosine = 0.0;
  double euclidean = 0.0;
};

struct PhaseRecord {
  int phase = 0;
  Index classes_seen = 0;
  double acc_cumulative = 0.0;  // accuracy on the union of test sets 0..i
  double acc_phase0 = 0.0;      // accuracy on the phase-0 test set
  std::vector<double> model_loss_trace;
  std::vector<double> exemplar_loss_trace;
  std::vector<double> exemplar_drift_trace;
  std::vector<double> finetune_loss_trace;
  std::vector<DriftRecord> drift;
  double wall_seconds = 0.0;  // informational; excluded from record files
};

struct PhaseResults {
  std::vector<PhaseRecord> phases;
};

// Per-phase artifacts for checkpointing and embedding dumps (optional).
struct RunArtifacts {
  std::vector<model::ClassifierParams> models;
  std::vector<exemplar::ExemplarSet> memory;
};

// Test hook: when set, replaces the strategy's new-class exemplar
// construction for a phase (nullopt falls through to the configured
// strategy). Lets tests pin identical exemplars across strategy labels.
class ExemplarInjector {
 public:
  virtual ~ExemplarInjector() = default;
  virtual std::optional<std::map<int, Matrix>> exemplars_for_phase(
      int phase, const dataio::LabeledDataset& train, Index quota) = 0;
};

PhaseSchedule build_schedule(Index total_classes, int incremental_phases);

// Trims every stored class to the budget quota by seeded random discard;
// snapshot rows are discarded in lockstep.
exemplar::ExemplarSet enforce_memory_budget(const exemplar::ExemplarSet& memory,
                                            const MemoryBudget& budget, std::uint64_t seed);

double average_accuracy(const PhaseResults& results);
// A_0^Z - A_N^Z: positive values mean forgetting.
double forgetting_rate(const PhaseResults& results);

double accuracy(const model::ClassifierParams& params, const Matrix& x,
                const std::vector<int>& head_labels);

PhaseResults run_mcil(const ExperimentConfig& config, const dataio::PhaseStream& stream,
                      ExemplarInjector* injector = nullptr, RunArtifacts* artifacts = nullptr);

}  // namespace micl::protocol
