#pragma once

#include <cmath>

namespace limeguard {

/// Forward-mode dual number: value + tangent * e, e^2 = 0.
///
/// Running the network's forward and backward passes on Dual inputs whose
/// tangent is a direction v in input space yields, in the tangent part of
/// the parameter gradient, the mixed second derivative d/dv (grad_theta f).
/// That is what the sensitivity penalty needs for its parameter gradient.
struct Dual {
  double v = 0.0;
  double d = 0.0;

  constexpr Dual() = default;
  constexpr Dual(double value) : v(value) {}  // NOLINT: implicit promotion is intended
  constexpr Dual(double value, double tangent) : v(value), d(tangent) {}

  constexpr Dual& operator+=(const Dual& o) {
    v += o.v;
    d += o.d;
    return *this;
  }
  constexpr Dual& operator-=(const Dual& o) {
    v -= o.v;
    d -= o.d;
    return *this;
  }
  constexpr Dual& operator*=(const Dual& o) {
    d = d * o.v + v * o.d;
    v *= o.v;
    return *this;
  }
  constexpr Dual& operator/=(const Dual& o) {
    d = (d * o.v - v * o.d) / (o.v * o.v);
    v /= o.v;
    return *this;
  }
};

constexpr Dual operator+(Dual a, const Dual& b) { return a += b; }
constexpr Dual operator-(Dual a, const Dual& b) { return a -= b; }
constexpr Dual operator*(Dual a, const Dual& b) { return a *= b; }
constexpr Dual operator/(Dual a, const Dual& b) { return a /= b; }
constexpr Dual operator-(const Dual& a) { return {-a.v, -a.d}; }

// Ordering compares primal values only (used for ReLU, max-pool and argmax).
constexpr bool operator<(const Dual& a, const Dual& b) { return a.v < b.v; }
constexpr bool operator>(const Dual& a, const Dual& b) { return a.v > b.v; }

inline Dual exp(const Dual& a) {
  const double e = std::exp(a.v);
  return {e, e * a.d};
}
inline Dual log(const Dual& a) { return {std::log(a.v), a.d / a.v}; }
inline Dual sqrt(const Dual& a) {
  const double s = std::sqrt(a.v);
  return {s, s > 0.0 ? a.d / (2.0 * s) : 0.0};
}

inline double primal(double x) { return x; }
inline double primal(const Dual& x) { return x.v; }
inline double tangent(double) { return 0.0; }
inline double tangent(const Dual& x) { return x.d; }

}  // namespace limeguard
