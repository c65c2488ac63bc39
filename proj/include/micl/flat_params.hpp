#pragma once

#include <cmath>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "micl/errors.hpp"
#include "micl/types.hpp"

namespace micl {

// Validated dense tensor: explicit shape plus row-major 64-bit data.
// Construction rejects shape/size mismatches and non-finite entries.
class DenseTensor {
 public:
  DenseTensor(std::vector<Index> shape, Vector data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    Index expected = 1;
    for (Index s : shape_) {
      if (s <= 0) throw ShapeError("DenseTensor: non-positive dimension");
      expected *= s;
    }
    if (shape_.empty()) expected = 0;
    if (expected != data_.size())
      throw ShapeError("DenseTensor: shape/product mismatch (" + std::to_string(expected) +
                       " vs " + std::to_string(data_.size()) + ")");
    for (Index i = 0; i < data_.size(); ++i)
      if (!std::isfinite(data_[i]))
        throw NumericError("DenseTensor: non-finite entry at flat index " + std::to_string(i),
                           "tensor");
  }

  static DenseTensor from_matrix(const Matrix& m) {
    Vector flat(m.size());
    Index k = 0;
    for (Index r = 0; r < m.rows(); ++r)
      for (Index c = 0; c < m.cols(); ++c) flat[k++] = m(r, c);
    return DenseTensor({m.rows(), m.cols()}, std::move(flat));
  }

  const std::vector<Index>& shape() const { return shape_; }
  const Vector& data() const { return data_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }

  Matrix matrix() const {
    if (rank() != 2) throw ShapeError("DenseTensor: matrix() requires rank 2");
    Matrix m(shape_[0], shape_[1]);
    Index k = 0;
    for (Index r = 0; r < m.rows(); ++r)
      for (Index c = 0; c < m.cols(); ++c) m(r, c) = data_[k++];
    return m;
  }

 private:
  std::vector<Index> shape_;
  Vector data_;
};

struct ParamBlock {
  std::string name;
  std::vector<Index> shape;  // row-major within the flat vector
  Index offset = 0;
  Index size = 0;
};

// Immutable block layout shared by all FlatParams of one parameter family.
class FlatLayout {
 public:
  FlatLayout& add(std::string name, std::vector<Index> shape) {
    Index size = 1;
    for (Index s : shape) size *= s;
    blocks_.push_back(ParamBlock{std::move(name), std::move(shape), total_, size});
    total_ += size;
    return *this;
  }

  const std::vector<ParamBlock>& blocks() const { return blocks_; }
  Index total_size() const { return total_; }

  const ParamBlock& block(const std::string& name) const {
    for (const auto& b : blocks_)
      if (b.name == name) return b;
    throw ShapeError("FlatLayout: no block named '" + name + "'");
  }

  // Name of the block containing flat index i (for numeric-failure reports).
  const std::string& block_of(Index i) const {
    for (const auto& b : blocks_)
      if (i >= b.offset && i < b.offset + b.size) return b.name;
    throw ShapeError("FlatLayout: index out of range");
  }

  friend bool operator==(const FlatLayout& a, const FlatLayout& b) {
    if (a.total_ != b.total_ || a.blocks_.size() != b.blocks_.size()) return false;
    for (std::size_t i = 0; i < a.blocks_.size(); ++i) {
      const auto& x = a.blocks_[i];
      const auto& y = b.blocks_[i];
      if (x.name != y.name || x.shape != y.shape || x.offset != y.offset) return false;
    }
    return true;
  }

 private:
  std::vector<ParamBlock> blocks_;
  Index total_ = 0;
};

// Flat 64-bit parameter vector plus its named block layout. Value type;
// layout is shared, data is owned.
class FlatParams {
 public:
  FlatParams() : layout_(std::make_shared<FlatLayout>()) {}
  FlatParams(std::shared_ptr<const FlatLayout> layout, Vector values)
      : layout_(std::move(layout)), values_(std::move(values)) {
    if (values_.size() != layout_->total_size())
      throw ShapeError("FlatParams: value length " + std::to_string(values_.size()) +
                       " does not match layout size " + std::to_string(layout_->total_size()));
  }

  static FlatParams zeros_like(const FlatParams& other) {
    return FlatParams(other.layout_, Vector::Zero(other.size()));
  }

  const FlatLayout& layout() const { return *layout_; }
  std::shared_ptr<const FlatLayout> layout_ptr() const { return layout_; }
  const Vector& values() const { return values_; }
  Vector& values() { return values_; }
  Index size() const { return values_.size(); }
  double operator[](Index i) const { return values_[i]; }
  double& operator[](Index i) { return values_[i]; }

  bool same_layout(const FlatParams& other) const {
    return layout_ == other.layout_ || *layout_ == *other.layout_;
  }

  Matrix block_matrix(const std::string& name) const {
    const ParamBlock& b = layout_->block(name);
    if (b.shape.size() != 2) throw ShapeError("FlatParams: block '" + name + "' is not rank 2");
    Matrix m(b.shape[0], b.shape[1]);
    Index k = b.offset;
    for (Index r = 0; r < m.rows(); ++r)
      for (Index c = 0; c < m.cols(); ++c) m(r, c) = values_[k++];
    return m;
  }

  Vector block_vector(const std::string& name) const {
    const ParamBlock& b = layout_->block(name);
    return values_.segment(b.offset, b.size);
  }

 private:
  std::shared_ptr<const FlatLayout> layout_;
  Vector values_;
};

// Gradient steps K and inner learning rate for unrolled descent.
struct UnrollSpec {
  int steps = 5;
  double inner_lr = 0.01;

  UnrollSpec() = default;
  UnrollSpec(int k, double lr) : steps(k), inner_lr(lr) {
    if (steps < 0) throw ArgumentError("UnrollSpec: steps must be >= 0");
    if (!(inner_lr > 0.0)) throw ArgumentError("UnrollSpec: inner_lr must be positive");
  }
};

}  // namespace micl
