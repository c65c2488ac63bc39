#pragma once

#include <cmath>

namespace micl::ad {

// First-order dual number a + b*eps. Used as the tape's base scalar to get
// exact Hessian-vector products (forward-over-reverse).
struct Dual {
  double a = 0.0;
  double b = 0.0;

  Dual() = default;
  Dual(double value) : a(value) {}  // NOLINT: implicit by design
  Dual(double value, double tangent) : a(value), b(tangent) {}
};

inline Dual operator+(Dual x, Dual y) { return {x.a + y.a, x.b + y.b}; }
inline Dual operator-(Dual x, Dual y) { return {x.a - y.a, x.b - y.b}; }
inline Dual operator-(Dual x) { return {-x.a, -x.b}; }
inline Dual operator*(Dual x, Dual y) { return {x.a * y.a, x.a * y.b + x.b * y.a}; }
inline Dual operator/(Dual x, Dual y) {
  const double inv = 1.0 / y.a;
  return {x.a * inv, (x.b - x.a * y.b * inv) * inv};
}

inline Dual& operator+=(Dual& x, Dual y) { return x = x + y; }
inline Dual& operator-=(Dual& x, Dual y) { return x = x - y; }
inline Dual& operator*=(Dual& x, Dual y) { return x = x * y; }
inline Dual& operator/=(Dual& x, Dual y) { return x = x / y; }

// Comparisons act on the value part only.
inline bool operator<(Dual x, Dual y) { return x.a < y.a; }
inline bool operator>(Dual x, Dual y) { return x.a > y.a; }
inline bool operator<=(Dual x, Dual y) { return x.a <= y.a; }
inline bool operator>=(Dual x, Dual y) { return x.a >= y.a; }
inline bool operator==(Dual x, Dual y) { return x.a == y.a; }
inline bool operator!=(Dual x, Dual y) { return x.a != y.a; }

inline Dual exp(Dual x) {
  const double e = std::exp(x.a);
  return {e, x.b * e};
}
inline Dual log(Dual x) { return {std::log(x.a), x.b / x.a}; }
inline Dual tanh(Dual x) {
  const double t = std::tanh(x.a);
  return {t, x.b * (1.0 - t * t)};
}
inline Dual sqrt(Dual x) {
  const double s = std::sqrt(x.a);
  return {s, 0.5 * x.b / s};
}
inline Dual abs(Dual x) { return x.a < 0.0 ? -x : x; }

inline double value_part(double x) { return x; }
inline double value_part(Dual x) { return x.a; }
inline double tangent_part(double) { return 0.0; }
inline double tangent_part(Dual x) { return x.b; }

inline bool is_finite(double x) { return std::isfinite(x); }
inline bool is_finite(Dual x) { return std::isfinite(x.a) && std::isfinite(x.b); }

}  // namespace micl::ad
