#pragma once

#include "vflow/linalg.hpp"
#include "vflow/tessellation.hpp"

namespace vflow {

/// Inputs closer than this to the anchor are mapped to the anchor itself; the
/// log-det is then evaluated at this radius along the input's direction.
inline constexpr double kAnchorEps = 1e-12;
/// Faces with a_i^T delta at or below this never bound the ray.
inline constexpr double kDenominatorEps = 1e-12;

// Radial squash alpha(h) = softsign(gamma * h) and its companions.
double squash(double h, double gamma);
double squash_deriv(double h, double gamma);
double squash_inv(double a, double gamma);

/// Where the ray anchor + lambda * direction leaves the cell.
struct RayExit {
  double lambda_star = 0.0;
  ConstraintId active;
  Vector active_normal;  // a_i of the binding face
  double slope = 0.0;    // a_i^T direction, strictly positive

  /// d(lambda*)/d(direction) with the binding face held fixed.
  Vector gradient() const { return (-lambda_star / slope) * active_normal; }
};

RayExit ray_exit(const Tessellation& tess, int k, Eigen::Ref<const Vector> direction);

/// Jacobian of f_k written as c I + u1 v1^T + u2 v2^T.
struct RankTwoJacobian {
  double c = 0.0;
  Vector u1, v1, u2, v2;

  /// log|det| through two applications of the matrix determinant lemma; only
  /// inner products of D-vectors are formed.
  double logdet() const;
  Matrix dense() const;
};

/// Radial quantities shared by the forward and inverse directions: everything
/// is expressed on the R^D side (radius delta, relative radius delta/lambda*).
RankTwoJacobian radial_jacobian(const RayExit& exit, const Vector& direction, double delta,
                                double alpha, double alpha_deriv);

struct MapResult {
  Vector point;
  double logdet = 0.0;
  double lambda_star = 0.0;
  ConstraintId active;
  Vector direction;
  double delta = 0.0;       // |x - x_k| on the R^D side
  double delta_star = 0.0;  // |x(lambda*) - x_k|, equal to lambda_star
  double alpha_val = 0.0;   // alpha(delta / delta_star)
};

/// f_k : R^D -> V_k together with log|det df_k/dx|.
MapResult forward(const Tessellation& tess, int k, Eigen::Ref<const Vector> x);

/// f_k^{-1} : V_k -> R^D together with log|det df_k^{-1}/dz|.
MapResult inverse(const Tessellation& tess, int k, Eigen::Ref<const Vector> z);

/// Materialized D x D Jacobian of forward(); for tests and diagnostics only.
Matrix dense_jacobian_reference(const Tessellation& tess, int k, Eigen::Ref<const Vector> x);

}  // namespace vflow
