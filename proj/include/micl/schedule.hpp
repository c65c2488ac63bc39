#pragma once

#include <numeric>
#include <string>
#include <vector>

#include "micl/errors.hpp"
#include "micl/types.hpp"

namespace micl::protocol {

// Class counts per phase: one initial phase plus N incremental phases.
// build() applies the benchmark rule (half the classes first, the rest
// evenly); explicit_phases() accepts any positive partition for desk-scale
// setups the strict rule cannot express.
struct PhaseSchedule {
  Index total_classes = 0;
  int incremental_phases = 0;  // N
  std::vector<Index> classes_per_phase;

  static PhaseSchedule build(Index total_classes, int n);
  static PhaseSchedule explicit_phases(std::vector<Index> classes_per_phase);

  std::size_t phase_count() const { return classes_per_phase.size(); }
  void validate() const;
};

inline PhaseSchedule PhaseSchedule::build(Index total, int n) {
  if (total <= 0 || total % 2 != 0)
    throw ScheduleError("total_classes must be a positive even number, got " +
                        std::to_string(total));
  if (n < 0) throw ScheduleError("incremental phase count must be >= 0");
  PhaseSchedule s;
  s.total_classes = total;
  s.incremental_phases = n;
  if (n == 0) {
    s.classes_per_phase = {total};
    return s;
  }
  const Index half = total / 2;
  if (half % n != 0)
    throw ScheduleError("remaining " + std::to_string(half) + " classes are not divisible by " +
                        std::to_string(n) + " incremental phases");
  s.classes_per_phase.push_back(half);
  for (int i = 0; i < n; ++i) s.classes_per_phase.push_back(half / n);
  return s;
}

inline PhaseSchedule PhaseSchedule::explicit_phases(std::vector<Index> phases) {
  PhaseSchedule s;
  s.classes_per_phase = std::move(phases);
  s.incremental_phases = static_cast<int>(s.classes_per_phase.size()) - 1;
  s.total_classes =
      std::accumulate(s.classes_per_phase.begin(), s.classes_per_phase.end(), Index{0});
  s.validate();
  return s;
}

inline void PhaseSchedule::validate() const {
  if (classes_per_phase.empty()) throw ScheduleError("schedule has no phases");
  Index sum = 0;
  for (Index c : classes_per_phase) {
    if (c < 1) throw ScheduleError("every phase needs at least one class");
    sum += c;
  }
  if (sum != total_classes)
    throw ScheduleError("phase class counts sum to " + std::to_string(sum) + ", expected " +
                        std::to_string(total_classes));
  if (static_cast<int>(classes_per_phase.size()) != incremental_phases + 1)
    throw ScheduleError("phase list length does not match N+1");
}

struct MemoryBudget {
  enum class Mode { kPerClass, kTotal };

  Mode mode = Mode::kPerClass;
  Index per_class = 20;
  Index total_capacity = 0;

  // Per-class exemplar target once `classes_seen` classes are stored.
  Index quota(Index classes_seen) const {
    if (classes_seen < 1) throw ArgumentError("quota: classes_seen must be >= 1");
    if (mode == Mode::kPerClass) return per_class;
    const Index q = total_capacity / classes_seen;
    if (q < 1)
      throw BudgetError("memory budget exhausted: capacity " + std::to_string(total_capacity) +
                        " over " + std::to_string(classes_seen) + " classes");
    return q;
  }

  void validate() const {
    if (mode == Mode::kPerClass && per_class < 1)
      throw ArgumentError("per_class budget must be >= 1");
    if (mode == Mode::kTotal && total_capacity < 1)
      throw ArgumentError("total budget capacity must be >= 1");
  }
};

}  // namespace micl::protocol
