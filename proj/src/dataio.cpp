#include "micl/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "micl/errors.hpp"
#include "micl/rng.hpp"
#include "micl/text.hpp"

namespace micl::dataio {

std::vector<int> LabeledDataset::class_ids() const {
  std::set<int> s(labels.begin(), labels.end());
  return std::vector<int>(s.begin(), s.end());
}

Matrix LabeledDataset::rows_of_class(int c) const {
  Index count = 0;
  for (int l : labels)
    if (l == c) ++count;
  Matrix out(count, width());
  Index at = 0;
  for (Index r = 0; r < rows(); ++r)
    if (labels[static_cast<std::size_t>(r)] == c) out.row(at++) = features.row(r);
  return out;
}

void LabeledDataset::validate() const {
  if (static_cast<Index>(labels.size()) != features.rows())
    throw ShapeError("dataset: label count " + std::to_string(labels.size()) +
                     " does not match feature rows " + std::to_string(features.rows()));
}

void GaussianMixtureSpec::validate() const {
  if (classes.empty()) throw ArgumentError("gaussian spec: no classes");
  const Index width = classes.front().mean.size();
  for (std::size_t c = 0; c < classes.size(); ++c) {
    const auto& cl = classes[c];
    if (cl.mean.size() != width || cl.variance.size() != width)
      throw ShapeError("gaussian spec: class " + std::to_string(c) + " width mismatch");
    if (cl.train_count < 1 || cl.test_count < 0)
      throw ArgumentError("gaussian spec: class " + std::to_string(c) + " has invalid counts");
    for (Index i = 0; i < width; ++i)
      if (!(cl.variance[i] > 0.0))
        throw ArgumentError("gaussian spec: variances must be positive");
  }
  if (phase_drift.size() != 0 && phase_drift.size() != width)
    throw ShapeError("gaussian spec: drift width mismatch");
}

GaussianMixtureSpec hexagon_spec(Index classes, double radius, double variance, long train_count,
                                 long test_count) {
  GaussianMixtureSpec spec;
  for (Index c = 0; c < classes; ++c) {
    const double angle = 2.0 * M_PI * static_cast<double>(c) / static_cast<double>(classes);
    GaussianClassSpec cl;
    cl.mean = (Vector(2) << radius * std::cos(angle), radius * std::sin(angle)).finished();
    cl.variance = Vector::Constant(2, variance);
    cl.train_count = train_count;
    cl.test_count = test_count;
    spec.classes.push_back(std::move(cl));
  }
  return spec;
}

LabeledDataset PhaseStream::cumulative_test(std::size_t upto) const {
  if (upto >= phases.size()) throw ArgumentError("cumulative_test: phase index out of range");
  Index rows = 0;
  for (std::size_t i = 0; i <= upto; ++i) rows += phases[i].test.rows();
  LabeledDataset out;
  out.features.resize(rows, phases[0].train.width());
  out.labels.reserve(static_cast<std::size_t>(rows));
  Index at = 0;
  for (std::size_t i = 0; i <= upto; ++i) {
    const auto& t = phases[i].test;
    out.features.middleRows(at, t.rows()) = t.features;
    out.labels.insert(out.labels.end(), t.labels.begin(), t.labels.end());
    at += t.rows();
  }
  return out;
}

std::vector<int> PhaseStream::class_order() const {
  std::vector<int> order;
  for (const auto& p : phases)
    for (int c : p.train.class_ids()) order.push_back(c);
  return order;
}

void PhaseStream::validate() const {
  std::set<int> seen;
  for (std::size_t i = 0; i < phases.size(); ++i) {
    phases[i].train.validate();
    phases[i].test.validate();
    for (int c : phases[i].train.class_ids()) {
      if (seen.count(c))
        throw ScheduleError("class " + std::to_string(c) + " appears in more than one phase");
      seen.insert(c);
    }
  }
}

PhaseStream generate_gaussian_stream(const GaussianMixtureSpec& spec,
                                     const protocol::PhaseSchedule& schedule,
                                     std::uint64_t seed) {
  spec.validate();
  schedule.validate();
  if (static_cast<Index>(spec.classes.size()) != schedule.total_classes)
    throw ArgumentError("gaussian stream: spec has " + std::to_string(spec.classes.size()) +
                        " classes, schedule expects " + std::to_string(schedule.total_classes));

  const Index width = spec.classes.front().mean.size();
  PhaseStream stream;
  std::size_t next_class = 0;
  for (std::size_t p = 0; p < schedule.phase_count(); ++p) {
    Phase phase;
    Index train_rows = 0;
    Index test_rows = 0;
    const std::size_t begin = next_class;
    const std::size_t end = begin + static_cast<std::size_t>(schedule.classes_per_phase[p]);
    for (std::size_t c = begin; c < end; ++c) {
      train_rows += spec.classes[c].train_count;
      test_rows += spec.classes[c].test_count;
    }
    phase.train.features.resize(train_rows, width);
    phase.test.features.resize(test_rows, width);
    Index train_at = 0;
    Index test_at = 0;
    for (std::size_t c = begin; c < end; ++c) {
      const auto& cl = spec.classes[c];
      Vector mean = cl.mean;
      if (spec.phase_drift.size() > 0) mean += static_cast<double>(p) * spec.phase_drift;
      auto rng = make_rng(subseed(seed, static_cast<int>(c), SeedPurpose::kDataSample));
      std::normal_distribution<double> normal(0.0, 1.0);
      auto sample_into = [&](Matrix& dest, Index at, long count) {
        for (long r = 0; r < count; ++r)
          for (Index f = 0; f < width; ++f)
            dest(at + r, f) = mean[f] + std::sqrt(cl.variance[f]) * normal(rng);
      };
      sample_into(phase.train.features, train_at, cl.train_count);
      sample_into(phase.test.features, test_at, cl.test_count);
      for (long r = 0; r < cl.train_count; ++r) phase.train.labels.push_back(static_cast<int>(c));
      for (long r = 0; r < cl.test_count; ++r) phase.test.labels.push_back(static_cast<int>(c));
      train_at += cl.train_count;
      test_at += cl.test_count;
    }
    next_class = end;
    stream.phases.push_back(std::move(phase));
  }
  stream.validate();
  return stream;
}

PhaseStream partition_stream(const LabeledDataset& ds, const protocol::PhaseSchedule& schedule,
                             double test_fraction, std::uint64_t seed) {
  ds.validate();
  schedule.validate();
  if (!(test_fraction >= 0.0 && test_fraction < 1.0))
    throw ArgumentError("test_fraction must be in [0,1)");
  const auto classes = ds.class_ids();
  if (static_cast<Index>(classes.size()) != schedule.total_classes)
    throw ScheduleError("dataset has " + std::to_string(classes.size()) +
                        " classes, schedule expects " + std::to_string(schedule.total_classes));

  auto class_order = shuffled_indices(static_cast<long>(classes.size()),
                                      subseed(seed, 0, SeedPurpose::kDataPartition));
  PhaseStream stream;
  std::size_t next = 0;
  for (std::size_t p = 0; p < schedule.phase_count(); ++p) {
    Phase phase;
    std::vector<Matrix> train_parts, test_parts;
    std::vector<int> train_labels, test_labels;
    Index train_rows = 0, test_rows = 0;
    for (Index k = 0; k < schedule.classes_per_phase[p]; ++k) {
      const int c = classes[static_cast<std::size_t>(class_order[next++])];
      Matrix rows = ds.rows_of_class(c);
      const Index n = rows.rows();
      const Index n_test = static_cast<Index>(std::llround(test_fraction * static_cast<double>(n)));
      auto order = shuffled_indices(n, subseed(seed, c, SeedPurpose::kDataPartition, 1));
      Matrix test(n_test, rows.cols()), train(n - n_test, rows.cols());
      for (Index i = 0; i < n_test; ++i) test.row(i) = rows.row(order[static_cast<std::size_t>(i)]);
      for (Index i = n_test; i < n; ++i)
        train.row(i - n_test) = rows.row(order[static_cast<std::size_t>(i)]);
      train_rows += train.rows();
      test_rows += test.rows();
      for (Index i = 0; i < train.rows(); ++i) train_labels.push_back(c);
      for (Index i = 0; i < test.rows(); ++i) test_labels.push_back(c);
      train_parts.push_back(std::move(train));
      test_parts.push_back(std::move(test));
    }
    phase.train.features.resize(train_rows, ds.width());
    phase.test.features.resize(test_rows, ds.width());
    Index ta = 0, sa = 0;
    for (const auto& m : train_parts) {
      phase.train.features.middleRows(ta, m.rows()) = m;
      ta += m.rows();
    }
    for (const auto& m : test_parts) {
      phase.test.features.middleRows(sa, m.rows()) = m;
      sa += m.rows();
    }
    phase.train.labels = std::move(train_labels);
    phase.test.labels = std::move(test_labels);
    stream.phases.push_back(std::move(phase));
  }
  stream.validate();
  return stream;
}

void save_dataset(const LabeledDataset& ds, const std::string& path) {
  ds.validate();
  std::ofstream out(path);
  if (!out) throw IoError("cannot open dataset for writing: " + path);
  out << "label";
  for (Index f = 0; f < ds.width(); ++f) out << ",f" << f;
  out << "\n";
  for (Index r = 0; r < ds.rows(); ++r) {
    out << ds.labels[static_cast<std::size_t>(r)];
    for (Index f = 0; f < ds.width(); ++f) out << "," << format_double(ds.features(r, f));
    out << "\n";
  }
  if (!out) throw IoError("dataset write failed: " + path);
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.push_back("");
  return out;
}

}  // namespace

LabeledDataset load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset: " + path);
  std::string line;
  long lineno = 0;
  if (!std::getline(in, line)) throw ParseError("empty dataset file", 0);
  ++lineno;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  auto header = split_csv(line);
  if (header.empty() || header[0] != "label")
    throw ParseError("expected header starting with 'label'", lineno);
  const Index width = static_cast<Index>(header.size()) - 1;

  std::vector<double> values;
  std::vector<int> labels;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split_csv(line);
    if (static_cast<Index>(fields.size()) != width + 1)
      throw ParseError("expected " + std::to_string(width + 1) + " fields, got " +
                       std::to_string(fields.size()), lineno);
    labels.push_back(static_cast<int>(parse_long(fields[0], lineno)));
    for (Index f = 0; f < width; ++f)
      values.push_back(parse_double(fields[static_cast<std::size_t>(f) + 1], lineno));
  }
  LabeledDataset ds;
  ds.features.resize(static_cast<Index>(labels.size()), width);
  for (Index r = 0; r < ds.features.rows(); ++r)
    for (Index f = 0; f < width; ++f)
      ds.features(r, f) = values[static_cast<std::size_t>(r * width + f)];
  ds.labels = std::move(labels);
  return ds;
}

namespace {
constexpr char kBinaryMagic[8] = {'M', 'I', 'C', 'L', 'D', 'S', '1', '\n'};
constexpr std::uint32_t kBinaryVersion = 1;
}  // namespace

void save_dataset_binary(const LabeledDataset& ds, const std::string& path) {
  ds.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open dataset for writing: " + path);
  out.write(kBinaryMagic, sizeof(kBinaryMagic));
  const std::uint32_t version = kBinaryVersion;
  const std::uint64_t width = static_cast<std::uint64_t>(ds.width());
  const std::uint64_t rows = static_cast<std::uint64_t>(ds.rows());
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  out.write(reinterpret_cast<const char*>(&width), sizeof(width));
  out.write(reinterpret_cast<const char*>(&rows), sizeof(rows));
  for (Index r = 0; r < ds.rows(); ++r) {
    const std::int64_t label = ds.labels[static_cast<std::size_t>(r)];
    out.write(reinterpret_cast<const char*>(&label), sizeof(label));
    for (Index f = 0; f < ds.width(); ++f) {
      const double v = ds.features(r, f);
      out.write(reinterpret_cast<const char*>(&v), sizeof(v));
    }
  }
  if (!out) throw IoError("dataset write failed: " + path);
}

LabeledDataset load_dataset_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dataset: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kBinaryMagic, sizeof(magic)) != 0)
    throw ParseError("not a micl binary dataset", 0);
  std::uint32_t version = 0;
  std::uint64_t width = 0, rows = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  in.read(reinterpret_cast<char*>(&width), sizeof(width));
  in.read(reinterpret_cast<char*>(&rows), sizeof(rows));
  if (!in || version != kBinaryVersion) throw ParseError("unsupported binary dataset version", 0);
  LabeledDataset ds;
  ds.features.resize(static_cast<Index>(rows), static_cast<Index>(width));
  ds.labels.resize(rows);
  for (std::uint64_t r = 0; r < rows; ++r) {
    std::int64_t label = 0;
    in.read(reinterpret_cast<char*>(&label), sizeof(label));
    ds.labels[r] = static_cast<int>(label);
    for (std::uint64_t f = 0; f < width; ++f) {
      double v = 0.0;
      in.read(reinterpret_cast<char*>(&v), sizeof(v));
      ds.features(static_cast<Index>(r), static_cast<Index>(f)) = v;
    }
  }
  if (!in) throw ParseError("binary dataset truncated", 0);
  return ds;
}

}  // namespace micl::dataio
