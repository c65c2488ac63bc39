#pragma once

#include <Eigen/Core>
#include <cassert>
#include <type_traits>

#include "micl/dual.hpp"
#include "micl/tape.hpp"

namespace micl::ad {

// Reverse-mode scalar over base type T (double for gradients, Dual for
// Hessian-vector products). Constants carry no tape; an operation lands on
// the tape as soon as one operand does. Mixing variables from two different
// tapes is a logic error.
template <class T>
class Rvar {
 public:
  using Base = T;
  using Index = typename Tape<T>::Index;

  Rvar() = default;
  Rvar(T value) : value_(value) {}  // NOLINT: constants convert implicitly
  template <class U = T, class = std::enable_if_t<!std::is_same_v<U, double>>>
  Rvar(double value) : value_(T(value)) {}  // NOLINT

  static Rvar leaf(Tape<T>& tape, T value) { return Rvar(value, &tape, tape.leaf()); }

  const T& value() const { return value_; }
  bool is_constant() const { return tape_ == nullptr; }
  Index index() const { return index_; }
  Tape<T>* tape() const { return tape_; }

  friend Rvar operator+(const Rvar& x, const Rvar& y) {
    Tape<T>* t = joint_tape(x, y);
    if (!t) return Rvar(x.value_ + y.value_);
    return Rvar(x.value_ + y.value_, t, t->binary(x.index_, y.index_, T(1), T(1)));
  }
  friend Rvar operator-(const Rvar& x, const Rvar& y) {
    Tape<T>* t = joint_tape(x, y);
    if (!t) return Rvar(x.value_ - y.value_);
    return Rvar(x.value_ - y.value_, t, t->binary(x.index_, y.index_, T(1), T(-1)));
  }
  friend Rvar operator*(const Rvar& x, const Rvar& y) {
    Tape<T>* t = joint_tape(x, y);
    if (!t) return Rvar(x.value_ * y.value_);
    return Rvar(x.value_ * y.value_, t, t->binary(x.index_, y.index_, y.value_, x.value_));
  }
  friend Rvar operator/(const Rvar& x, const Rvar& y) {
    Tape<T>* t = joint_tape(x, y);
    const T inv = T(1) / y.value_;
    if (!t) return Rvar(x.value_ * inv);
    return Rvar(x.value_ * inv, t,
                t->binary(x.index_, y.index_, inv, -x.value_ * inv * inv));
  }
  friend Rvar operator-(const Rvar& x) {
    if (x.is_constant()) return Rvar(-x.value_);
    return Rvar(-x.value_, x.tape_, x.tape_->unary(x.index_, T(-1)));
  }

  Rvar& operator+=(const Rvar& y) { return *this = *this + y; }
  Rvar& operator-=(const Rvar& y) { return *this = *this - y; }
  Rvar& operator*=(const Rvar& y) { return *this = *this * y; }
  Rvar& operator/=(const Rvar& y) { return *this = *this / y; }

  friend bool operator<(const Rvar& x, const Rvar& y) { return x.value_ < y.value_; }
  friend bool operator>(const Rvar& x, const Rvar& y) { return x.value_ > y.value_; }
  friend bool operator<=(const Rvar& x, const Rvar& y) { return x.value_ <= y.value_; }
  friend bool operator>=(const Rvar& x, const Rvar& y) { return x.value_ >= y.value_; }
  friend bool operator==(const Rvar& x, const Rvar& y) { return x.value_ == y.value_; }
  friend bool operator!=(const Rvar& x, const Rvar& y) { return x.value_ != y.value_; }

  friend Rvar exp(const Rvar& x) {
    using std::exp;
    const T e = exp(x.value_);
    if (x.is_constant()) return Rvar(e);
    return Rvar(e, x.tape_, x.tape_->unary(x.index_, e));
  }
  friend Rvar log(const Rvar& x) {
    using std::log;
    const T v = log(x.value_);
    if (x.is_constant()) return Rvar(v);
    return Rvar(v, x.tape_, x.tape_->unary(x.index_, T(1) / x.value_));
  }
  friend Rvar tanh(const Rvar& x) {
    using std::tanh;
    const T v = tanh(x.value_);
    if (x.is_constant()) return Rvar(v);
    return Rvar(v, x.tape_, x.tape_->unary(x.index_, T(1) - v * v));
  }
  friend Rvar sqrt(const Rvar& x) {
    using std::sqrt;
    const T v = sqrt(x.value_);
    if (x.is_constant()) return Rvar(v);
    return Rvar(v, x.tape_, x.tape_->unary(x.index_, T(0.5) / v));
  }
  friend Rvar abs(const Rvar& x) { return x.value_ < T(0) ? -x : x; }
  friend Rvar abs2(const Rvar& x) { return x * x; }
  friend Rvar conj(const Rvar& x) { return x; }
  friend Rvar real(const Rvar& x) { return x; }
  friend Rvar imag(const Rvar&) { return Rvar(T(0)); }

 private:
  Rvar(T value, Tape<T>* tape, Index index) : value_(value), tape_(tape), index_(index) {}

  static Tape<T>* joint_tape(const Rvar& x, const Rvar& y) {
    if (x.tape_ && y.tape_) {
      assert(x.tape_ == y.tape_ && "operands live on different tapes");
      return x.tape_;
    }
    return x.tape_ ? x.tape_ : y.tape_;
  }

  T value_ = T(0);
  Tape<T>* tape_ = nullptr;
  Index index_ = -1;
};

using Rev = Rvar<double>;
using RevDual = Rvar<Dual>;

template <class T>
double value_part(const Rvar<T>& x) {
  return value_part(x.value());
}
template <class T>
double tangent_part(const Rvar<T>& x) {
  return tangent_part(x.value());
}
template <class T>
bool is_finite(const Rvar<T>& x) {
  return is_finite(x.value());
}

}  // namespace micl::ad

namespace Eigen {

template <class T>
struct NumTraits<micl::ad::Rvar<T>> : GenericNumTraits<micl::ad::Rvar<T>> {
  using Real = micl::ad::Rvar<T>;
  using NonInteger = Real;
  using Nested = Real;
  using Literal = Real;
  enum {
    IsComplex = 0,
    IsInteger = 0,
    IsSigned = 1,
    RequireInitialization = 1,
    ReadCost = 1,
    AddCost = 3,
    MulCost = 3,
  };
  static Real epsilon() { return Real(NumTraits<double>::epsilon()); }
  static Real dummy_precision() { return Real(1e-12); }
  static int digits10() { return NumTraits<double>::digits10(); }
};

template <>
struct NumTraits<micl::ad::Dual> : GenericNumTraits<micl::ad::Dual> {
  using Real = micl::ad::Dual;
  using NonInteger = Real;
  using Nested = Real;
  using Literal = Real;
  enum {
    IsComplex = 0,
    IsInteger = 0,
    IsSigned = 1,
    RequireInitialization = 1,
    ReadCost = 1,
    AddCost = 2,
    MulCost = 2,
  };
  static Real epsilon() { return Real(NumTraits<double>::epsilon()); }
  static Real dummy_precision() { return Real(1e-12); }
  static int digits10() { return NumTraits<double>::digits10(); }
};

}  // namespace Eigen
