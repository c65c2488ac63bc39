#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "micl/schedule.hpp"
#include "micl/types.hpp"

namespace micl::dataio {

struct LabeledDataset {
  Matrix features;  // rows x width
  std::vector<int> labels;

  Index rows() const { return features.rows(); }
  Index width() const { return features.cols(); }
  std::vector<int> class_ids() const;  // sorted distinct labels
  Matrix rows_of_class(int c) const;
  void validate() const;
};

struct GaussianClassSpec {
  Vector mean;
  Vector variance;  // diagonal covariance
  long train_count = 0;
  long test_count = 0;
};

// Desk-scale synthetic stream source. `phase_drift`, when non-empty, shifts
// the mean of every class assigned to phase p by p * phase_drift.
struct GaussianMixtureSpec {
  std::vector<GaussianClassSpec> classes;
  Vector phase_drift;

  void validate() const;
};

// 6 classes in 2-D with means on a radius-4 hexagon, unit variance: the
// default benchmark geometry.
GaussianMixtureSpec hexagon_spec(Index classes = 6, double radius = 4.0, double variance = 1.0,
                                 long train_count = 500, long test_count = 100);

struct Phase {
  LabeledDataset train;
  LabeledDataset test;
};

struct PhaseStream {
  std::vector<Phase> phases;

  std::size_t phase_count() const { return phases.size(); }
  std::vector<int> classes_in_phase(std::size_t i) const { return phases[i].train.class_ids(); }
  // Union of the test sets of phases 0..upto.
  LabeledDataset cumulative_test(std::size_t upto) const;
  // Class ids in phase order (head order for the incremental model).
  std::vector<int> class_order() const;
  void validate() const;  // phase class sets pairwise disjoint
};

PhaseStream generate_gaussian_stream(const GaussianMixtureSpec& spec,
                                     const protocol::PhaseSchedule& schedule, std::uint64_t seed);

// Seeded class-to-phase assignment and per-class train/test split of an
// existing dataset.
PhaseStream partition_stream(const LabeledDataset& ds, const protocol::PhaseSchedule& schedule,
                             double test_fraction, std::uint64_t seed);

// CSV with header `label,f0,f1,...`; features rendered with shortest
// round-trip decimals, so save -> load is bit-exact.
void save_dataset(const LabeledDataset& ds, const std::string& path);
LabeledDataset load_dataset(const std::string& path);

// Packed binary: magic "MICLDS1\n", u32 version, u64 width, u64 rows, then
// per row an i64 label and `width` little-endian 64-bit floats.
void save_dataset_binary(const LabeledDataset& ds, const std::string& path);
LabeledDataset load_dataset_binary(const std::string& path);

}  // namespace micl::dataio
