#pragma once

// Shared generators and oracles for the test binaries. Generators are
// hand-rolled on top of mt19937_64 so every property test is reproducible
// from its seed.

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>

#include "vflow/cell_map.hpp"
#include "vflow/error.hpp"
#include "vflow/tessellation.hpp"

namespace vflow::testing {

using Rng = std::mt19937_64;

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline int uniform_int(Rng& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

inline Vector random_unit(Rng& rng, int d) {
  std::normal_distribution<double> normal;
  Vector v(d);
  do {
    for (int i = 0; i < d; ++i) v[i] = normal(rng);
  } while (v.norm() < 1e-3);
  return v / v.norm();
}

/// Random valid tessellation: asymmetric box, anchors spread inside it with a
/// minimum separation, scales in [e^-1, e].
inline Tessellation random_tessellation(Rng& rng, int K, int D, double min_sep = 1e-2) {
  Vector lo(D), hi(D);
  for (int d = 0; d < D; ++d) {
    lo[d] = -uniform(rng, 1.0, 4.0);
    hi[d] = uniform(rng, 1.0, 4.0);
  }
  Matrix anchors(K, D);
  for (int k = 0; k < K; ++k) {
    for (;;) {
      for (int d = 0; d < D; ++d) {
        const double margin = 0.05 * (hi[d] - lo[d]);
        anchors(k, d) = uniform(rng, lo[d] + margin, hi[d] - margin);
      }
      bool ok = true;
      for (int j = 0; j < k && ok; ++j) ok = (anchors.row(j) - anchors.row(k)).norm() > min_sep;
      if (ok) break;
    }
  }
  Vector scales(K);
  for (int k = 0; k < K; ++k) scales[k] = std::exp(uniform(rng, -1.0, 1.0));
  return Tessellation(anchors, lo, hi, scales);
}

inline Vector random_in_box(Rng& rng, const Tessellation& t) {
  Vector x(t.dim());
  for (int d = 0; d < t.dim(); ++d) x[d] = uniform(rng, t.box_lo()[d], t.box_hi()[d]);
  return x;
}

/// Gaussian input around anchor k with scale comparable to the box.
inline Vector random_input(Rng& rng, const Tessellation& t, int k, double sd = 1.5) {
  std::normal_distribution<double> normal(0.0, sd);
  Vector x = t.anchor(k);
  for (int d = 0; d < t.dim(); ++d) x[d] += normal(rng);
  return x;
}

/// Exit distance along the ray found by bisection on the membership
/// predicate alone; independent of the closed-form face enumeration.
inline double bisection_exit(const Tessellation& t, int k, const Vector& dir) {
  const Vector xk = t.anchor(k);
  double lo = 0.0;
  double hi = (t.box_hi() - t.box_lo()).norm() * 2.0;
  for (int it = 0; it < 200 && hi - lo > 1e-15 * (1.0 + hi); ++it) {
    const double mid = 0.5 * (lo + hi);
    if (t.contains(k, xk + mid * dir)) lo = mid;
    else hi = mid;
  }
  return 0.5 * (lo + hi);
}

/// Central-difference Jacobian of the forward map.
inline Matrix fd_jacobian(const Tessellation& t, int k, const Vector& x, double h = 1e-6) {
  const int D = t.dim();
  Matrix J(D, D);
  for (int j = 0; j < D; ++j) {
    Vector xp = x, xm = x;
    xp[j] += h;
    xm[j] -= h;
    J.col(j) = (forward(t, k, xp).point - forward(t, k, xm).point) / (2.0 * h);
  }
  return J;
}

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

/// Code of the library error raised by `f`, or empty if it returns normally.
template <class F>
std::optional<Errc> error_code(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return std::nullopt;
}

}  // namespace vflow::testing
