#include "micl/protocol.hpp"

#include <chrono>
#include <cmath>

#include "micl/diffcore.hpp"
#include "micl/rng.hpp"

namespace micl::protocol {

std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kRandom: return "random";
    case Strategy::kHerding: return "herding";
    case Strategy::kMnemonics: return "mnemonics";
    case Strategy::kUpperBound: return "upper_bound";
  }
  return "?";
}

Strategy strategy_from_name(const std::string& name) {
  if (name == "random") return Strategy::kRandom;
  if (name == "herding") return Strategy::kHerding;
  if (name == "mnemonics") return Strategy::kMnemonics;
  if (name == "upper_bound") return Strategy::kUpperBound;
  throw ArgumentError("unknown strategy '" + name + "'");
}

void ExperimentConfig::validate() const {
  schedule.validate();
  budget.validate();
  loss.validate();
  exemplar_hp.validate();
  if (!(model_lr > 0.0)) throw ArgumentError("model_lr must be positive");
  if (model_epochs < 0) throw ArgumentError("model_epochs must be >= 0");
  if (!(fine_tune_lr > 0.0)) throw ArgumentError("fine_tune_lr must be positive");
  if (fine_tune_epochs < 0) throw ArgumentError("fine_tune_epochs must be >= 0");
  if (hidden_units < 0) throw ArgumentError("hidden_units must be >= 0");
  if (!(init_std > 0.0) || !(head_init_std > 0.0))
    throw ArgumentError("init std deviations must be positive");
}

PhaseSchedule build_schedule(Index total_classes, int incremental_phases) {
  return PhaseSchedule::build(total_classes, incremental_phases);
}

exemplar::ExemplarSet enforce_memory_budget(const exemplar::ExemplarSet& memory,
                                            const MemoryBudget& budget, std::uint64_t seed) {
  if (memory.per_class.empty()) throw ArgumentError("enforce_memory_budget: empty memory");
  memory.validate();
  const Index quota = budget.quota(static_cast<Index>(memory.per_class.size()));

  exemplar::ExemplarSet out = memory;
  for (auto& [c, rows] : out.per_class) {
    if (rows.rows() <= quota) continue;
    auto keep = sample_without_replacement(
        rows.rows(), quota, mix_seed(seed, static_cast<std::uint64_t>(c)));
    Matrix trimmed(quota, rows.cols());
    Matrix trimmed_init(quota, rows.cols());
    const Matrix& init = out.init_snapshot.at(c);
    for (Index i = 0; i < quota; ++i) {
      trimmed.row(i) = rows.row(keep[static_cast<std::size_t>(i)]);
      trimmed_init.row(i) = init.row(keep[static_cast<std::size_t>(i)]);
    }
    rows = std::move(trimmed);
    out.init_snapshot[c] = std::move(trimmed_init);
  }
  return out;
}

double average_accuracy(const PhaseResults& results) {
  if (results.phases.empty()) throw ArgumentError("average_accuracy: no phase records");
  double sum = 0.0;
  for (const auto& p : results.phases) sum += p.acc_cumulative;
  return sum / static_cast<double>(results.phases.size());
}

double forgetting_rate(const PhaseResults& results) {
  if (results.phases.empty()) throw ArgumentError("forgetting_rate: no phase records");
  return results.phases.front().acc_phase0 - results.phases.back().acc_phase0;
}

double accuracy(const model::ClassifierParams& params, const Matrix& x,
                const std::vector<int>& head_labels) {
  if (x.rows() == 0) return 0.0;
  Matrix logits = model::forward(params, std::nullopt, x);
  Index correct = 0;
  for (Index r = 0; r < logits.rows(); ++r) {
    Index best = 0;
    for (Index k = 1; k < logits.cols(); ++k)
      if (logits(r, k) > logits(r, best)) best = k;  // ties keep the lowest index
    if (best == head_labels[static_cast<std::size_t>(r)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(logits.rows());
}

namespace {

struct LabelSpace {
  std::map<int, int> head_of;       // class id -> logit index
  std::vector<int> class_by_head;   // logit index -> class id

  void extend(const std::vector<int>& new_classes) {
    for (int c : new_classes) {
      head_of.emplace(c, static_cast<int>(class_by_head.size()));
      class_by_head.push_back(c);
    }
  }

  std::vector<int> to_head(const std::vector<int>& class_labels) const {
    std::vector<int> out;
    out.reserve(class_labels.size());
    for (int c : class_labels) out.push_back(head_of.at(c));
    return out;
  }
};

// Exemplars plus replayed data assembled into one training batch.
struct Batch {
  Matrix x;
  std::vector<int> head_labels;
};

Batch concat_batches(const Matrix& a, const std::vector<int>& la, const Matrix& b,
                     const std::vector<int>& lb) {
  Batch out;
  out.x.resize(a.rows() + b.rows(), a.cols() > 0 ? a.cols() : b.cols());
  if (a.rows() > 0) out.x.topRows(a.rows()) = a;
  if (b.rows() > 0) out.x.bottomRows(b.rows()) = b;
  out.head_labels = la;
  out.head_labels.insert(out.head_labels.end(), lb.begin(), lb.end());
  return out;
}

// Model-level training for one phase: transfer parameterization with free
// new-head rows, or plain over-writing descent, per config.
struct PhaseTrainOutcome {
  model::ClassifierParams params;
  std::vector<double> loss_trace;
};

PhaseTrainOutcome train_phase_model(const ExperimentConfig& cfg,
                                    const model::ClassifierParams& grown,
                                    const model::ClassifierParams& teacher, Index new_classes,
                                    const Batch& batch) {
  model::PhaseObjective obj;
  obj.x = batch.x;
  obj.labels = batch.head_labels;
  if (cfg.use_distillation) {
    obj.lambda = cfg.loss.lambda;
    obj.tau = cfg.loss.temperature;
    obj.old_classes = teacher.num_classes();
    obj.teacher_probs =
        model::teacher_tempered_probs(teacher, batch.x, cfg.loss.temperature, obj.old_classes);
  } else {
    obj.lambda = 1.0;
  }

  PhaseTrainOutcome out;
  if (cfg.use_transfer) {
    obj.mode = model::PhaseObjective::Mode::kTransferFreeHead;
    obj.base = &grown;
    obj.free_head_rows = new_classes;

    // Flat vector: per-layer (scale, shift) over the transferred rows, then
    // the free new-head rows and biases.
    auto layout = std::make_shared<FlatLayout>();
    const auto& layers = grown.layers;
    const std::size_t last = layers.size() - 1;
    Index total = 0;
    for (std::size_t q = 0; q < layers.size(); ++q) {
      const Index rows =
          (q == last) ? layers[q].W.rows() - new_classes : layers[q].W.rows();
      layout->add("layer" + std::to_string(q) + ".scale", {rows});
      layout->add("layer" + std::to_string(q) + ".shift", {rows});
      total += 2 * rows;
    }
    layout->add("head.W_new", {new_classes, layers[last].W.cols()});
    layout->add("head.b_new", {new_classes});
    total += new_classes * layers[last].W.cols() + new_classes;

    Vector values(total);
    Index off = 0;
    for (std::size_t q = 0; q < layers.size(); ++q) {
      const Index rows =
          (q == last) ? layers[q].W.rows() - new_classes : layers[q].W.rows();
      for (Index r = 0; r < rows; ++r) values[off++] = 1.0;
      for (Index r = 0; r < rows; ++r) values[off++] = 0.0;
    }
    for (Index r = layers[last].W.rows() - new_classes; r < layers[last].W.rows(); ++r) {
      for (Index c = 0; c < layers[last].W.cols(); ++c) values[off++] = layers[last].W(r, c);
      values[off++] = layers[last].b[r];
    }
    FlatParams flat(std::move(layout), std::move(values));

    for (int e = 0; e < cfg.model_epochs; ++e) {
      auto vg = diffcore::value_and_grad(obj, flat);
      out.loss_trace.push_back(vg.value);
      flat.values() -= cfg.model_lr * vg.gradient.values();
      for (Index i = 0; i < flat.size(); ++i)
        if (!std::isfinite(flat[i]) || std::abs(flat[i]) > diffcore::kDivergenceGuard)
          throw DivergenceError("model-level transfer training diverged", e);
    }
    out.loss_trace.push_back(obj(flat.values()));

    auto eff = model::transfer_layers_from_flat<double>(grown, flat.values(), new_classes);
    out.params = grown;
    for (std::size_t q = 0; q < out.params.layers.size(); ++q) {
      out.params.layers[q].W = eff.W[q];
      out.params.layers[q].b = eff.b[q];
    }
  } else {
    auto res = model::update_model_direct(grown, cfg.use_distillation ? &teacher : nullptr,
                                          batch.x, batch.head_labels, cfg.loss, cfg.model_lr,
                                          cfg.model_epochs);
    out.params = std::move(res.params);
    out.loss_trace = std::move(res.loss_trace);
  }
  return out;
}

struct NewExemplars {
  std::map<int, Matrix> exemplars;
  std::map<int, Matrix> init;  // values at birth (the random subset S for mnemonics)
};

NewExemplars build_new_exemplars(const ExperimentConfig& cfg, int phase,
                                 const dataio::LabeledDataset& train, Index quota,
                                 const model::ClassifierParams& trained, const LabelSpace& labels,
                                 std::vector<double>* loss_trace,
                                 std::vector<double>* drift_trace, ExemplarInjector* injector) {
  NewExemplars out;
  if (injector) {
    auto injected = injector->exemplars_for_phase(phase, train, quota);
    if (injected) {
      out.exemplars = *injected;
      out.init = out.exemplars;
      return out;
    }
  }

  const auto classes = train.class_ids();
  switch (cfg.strategy) {
    case Strategy::kUpperBound: {
      for (int c : classes) out.exemplars[c] = train.rows_of_class(c);
      break;
    }
    case Strategy::kRandom: {
      for (int c : classes)
        out.exemplars[c] = exemplar::select_random(
            train.rows_of_class(c), quota,
            subseed(cfg.master_seed, phase, SeedPurpose::kRandomSelect,
                    static_cast<std::uint64_t>(c)));
      break;
    }
    case Strategy::kHerding: {
      for (int c : classes) {
        Matrix rows = train.rows_of_class(c);
        Matrix feats = model::penultimate_features(trained, rows);
        auto picked = exemplar::select_herding(feats, quota);
        Matrix sel(quota, rows.cols());
        for (Index i = 0; i < quota; ++i) sel.row(i) = rows.row(picked[static_cast<std::size_t>(i)]);
        out.exemplars[c] = std::move(sel);
      }
      break;
    }
    case Strategy::kMnemonics: {
      std::map<int, Matrix> init;
      for (int c : classes)
        init[c] = exemplar::select_random(
            train.rows_of_class(c), quota,
            subseed(cfg.master_seed, phase, SeedPurpose::kExemplarInit,
                    static_cast<std::uint64_t>(c)));
      auto res = exemplar::train_mnemonics(init, labels.head_of, train.features,
                                           labels.to_head(train.labels), trained,
                                           cfg.exemplar_hp);
      if (loss_trace) *loss_trace = std::move(res.trace.outer_loss);
      if (drift_trace) *drift_trace = std::move(res.trace.drift_euclid);
      out.exemplars = std::move(res.exemplars);
      out.init = std::move(init);
      break;
    }
  }
  if (out.init.empty()) out.init = out.exemplars;
  return out;
}

exemplar::Origin origin_of(Strategy s) {
  switch (s) {
    case Strategy::kRandom: return exemplar::Origin::kRandom;
    case Strategy::kHerding: return exemplar::Origin::kHerding;
    case Strategy::kMnemonics: return exemplar::Origin::kMnemonics;
    case Strategy::kUpperBound: return exemplar::Origin::kUpperBound;
  }
  return exemplar::Origin::kRandom;
}

}  // namespace

PhaseResults run_mcil(const ExperimentConfig& config, const dataio::PhaseStream& stream,
                      ExemplarInjector* injector, RunArtifacts* artifacts) {
  config.validate();
  stream.validate();
  if (stream.phase_count() != config.schedule.phase_count())
    throw ScheduleError("stream has " + std::to_string(stream.phase_count()) +
                        " phases, schedule expects " +
                        std::to_string(config.schedule.phase_count()));
  for (std::size_t p = 0; p < stream.phase_count(); ++p)
    if (static_cast<Index>(stream.classes_in_phase(p).size()) !=
        config.schedule.classes_per_phase[p])
      throw ScheduleError("phase " + std::to_string(p) + " class count does not match schedule");

  const Index width = stream.phases[0].train.width();
  LabelSpace labels;
  PhaseResults results;
  model::ClassifierParams current;
  exemplar::ExemplarSet memory;
  memory.origin = origin_of(config.strategy);

  for (std::size_t phase = 0; phase < stream.phase_count(); ++phase) {
    const auto started = std::chrono::steady_clock::now();
    const auto& data = stream.phases[phase];
    const auto new_classes = data.train.class_ids();
    labels.extend(new_classes);
    const Index classes_seen = static_cast<Index>(labels.class_by_head.size());

    PhaseRecord record;
    record.phase = static_cast<int>(phase);
    record.classes_seen = classes_seen;

    if (phase == 0) {
      // Initial phase: plain training from random init, classification only.
      std::vector<Index> widths;
      widths.push_back(width);
      if (config.hidden_units > 0) widths.push_back(config.hidden_units);
      widths.push_back(static_cast<Index>(new_classes.size()));
      current = model::random_init(
          widths,
          config.hidden_units > 0 ? model::Activation::kTanh : model::Activation::kIdentity,
          config.init_std, subseed(config.master_seed, 0, SeedPurpose::kModelInit));
      auto res = model::update_model_direct(current, nullptr, data.train.features,
                                            labels.to_head(data.train.labels), config.loss,
                                            config.model_lr, config.model_epochs);
      current = std::move(res.params);
      record.model_loss_trace = std::move(res.loss_trace);
    } else {
      // Incremental phase: grow the head, train on memory + new data with
      // the previous model as distillation teacher.
      const model::ClassifierParams teacher = current;
      model::ClassifierParams grown = model::grow_head(
          current, static_cast<Index>(new_classes.size()), config.head_init_std,
          subseed(config.master_seed, static_cast<int>(phase), SeedPurpose::kHeadInit));

      auto [mem_x, mem_classes] = exemplar::stack_classes(memory.per_class);
      Batch batch = concat_batches(mem_x, labels.to_head(mem_classes), data.train.features,
                                   labels.to_head(data.train.labels));
      auto trained = train_phase_model(config, grown, teacher,
                                       static_cast<Index>(new_classes.size()), batch);
      current = std::move(trained.params);
      record.model_loss_trace = std::move(trained.loss_trace);
    }

    // New-class exemplars from the current phase's data.
    const Index quota =
        config.strategy == Strategy::kUpperBound ? 0 : config.budget.quota(classes_seen);
    NewExemplars fresh = build_new_exemplars(config, static_cast<int>(phase), data.train, quota,
                                             current, labels, &record.exemplar_loss_trace,
                                             &record.exemplar_drift_trace, injector);

    // Old-exemplar adjustment (before budget enforcement).
    if (phase > 0 && config.adjust_old && config.strategy != Strategy::kUpperBound &&
        !memory.per_class.empty()) {
      memory = exemplar::adjust_old_exemplars(
          memory, labels.head_of, current, config.exemplar_hp,
          subseed(config.master_seed, static_cast<int>(phase), SeedPurpose::kAdjustSplit));
    }

    // Merge the new class exemplars into memory.
    for (auto& [c, rows] : fresh.exemplars) {
      memory.init_snapshot[c] = std::move(fresh.init.at(c));
      memory.per_class[c] = std::move(rows);
    }

    // Budget enforcement (optional discard step).
    if (config.strategy != Strategy::kUpperBound)
      memory = enforce_memory_budget(
          memory, config.budget,
          subseed(config.master_seed, static_cast<int>(phase), SeedPurpose::kDiscard));

    // Balanced fine-tuning on the exemplar union.
    if (config.fine_tune) {
      auto ft = exemplar::fine_tune_balanced(current, memory, labels.head_of,
                                             config.fine_tune_lr, config.fine_tune_epochs);
      current = std::move(ft.params);
      record.finetune_loss_trace = std::move(ft.loss_trace);
    }

    // Evaluation on all classes seen so far, plus the phase-0 slice.
    auto cumulative = stream.cumulative_test(phase);
    record.acc_cumulative =
        accuracy(current, cumulative.features, labels.to_head(cumulative.labels));
    const auto& first_test = stream.phases[0].test;
    record.acc_phase0 = accuracy(current, first_test.features, labels.to_head(first_test.labels));

    for (const auto& [c, d] : exemplar::exemplar_drift(memory))
      record.drift.push_back(DriftRecord{c, d.cosine, d.euclidean});

    record.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    results.phases.push_back(std::move(record));

    if (artifacts) {
      artifacts->models.push_back(current);
      artifacts->memory.push_back(memory);
    }
  }
  return results;
}

}  // namespace micl::protocol
