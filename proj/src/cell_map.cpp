#include "vflow/cell_map.hpp"

#include <cmath>
#include <limits>

namespace vflow {

double squash(double h, double gamma) {
  if (h < 0.0) throw Error(Errc::NegativeInput, "squash expects a nonnegative radius");
  const double g = gamma * h;
  return g / (1.0 + g);
}

double squash_deriv(double h, double gamma) {
  if (h < 0.0) throw Error(Errc::NegativeInput, "squash expects a nonnegative radius");
  const double t = 1.0 + gamma * h;
  return gamma / (t * t);
}

double squash_inv(double a, double gamma) {
  if (a < 0.0) throw Error(Errc::NegativeInput, "squash inverse expects a nonnegative value");
  return a / (gamma * (1.0 - a));
}

RayExit ray_exit(const Tessellation& tess, int k, Eigen::Ref<const Vector> direction) {
  tess.check_index(k);
  const int D = tess.dim();
  if (direction.size() != D) throw Error(Errc::ShapeMismatch, "direction dimension mismatch");
  if (!direction.allFinite()) throw Error(Errc::NonFiniteInput, "direction is not finite");
  if (std::abs(direction.norm() - 1.0) > 1e-6)
    throw Error(Errc::NonUnitDirection, "direction must have unit norm");

  const auto& anchors = tess.anchors();
  const auto xk = anchors.row(k);
  RayExit best;
  best.lambda_star = std::numeric_limits<double>::infinity();
  bool found = false;

  auto consider = [&](double num, double den, ConstraintId id) {
    if (!(den > kDenominatorEps)) return;
    const double lam = num / den;
    if (lam > 0.0 && lam < best.lambda_star) {
      best.lambda_star = lam;
      best.active = id;
      best.slope = den;
      found = true;
    }
  };

  // b_i - a_i^T x_k simplifies to |x_i - x_k|^2 for Voronoi faces.
  for (int i = 0; i < tess.num_cells(); ++i) {
    if (i == k) continue;
    const auto diff = anchors.row(i) - xk;
    consider(diff.squaredNorm(), 2.0 * diff.dot(direction.transpose()),
             {ConstraintKind::Voronoi, i});
  }
  for (int d = 0; d < D; ++d)
    consider(xk[d] - tess.box_lo()[d], -direction[d], {ConstraintKind::BoxLower, d});
  for (int d = 0; d < D; ++d)
    consider(tess.box_hi()[d] - xk[d], direction[d], {ConstraintKind::BoxUpper, d});

  if (!found || !std::isfinite(best.lambda_star))
    throw Error(Errc::NoExit, "ray never leaves the cell");

  switch (best.active.kind) {
    case ConstraintKind::Voronoi:
      best.active_normal = 2.0 * (anchors.row(best.active.index) - xk).transpose();
      break;
    case ConstraintKind::BoxLower:
      best.active_normal = -Vector::Unit(D, best.active.index);
      break;
    case ConstraintKind::BoxUpper:
      best.active_normal = Vector::Unit(D, best.active.index);
      break;
  }
  return best;
}

double RankTwoJacobian::logdet() const {
  const double D = static_cast<double>(u1.size());
  const double w11 = v1.dot(u1) / c;
  const double w12 = v1.dot(u2) / c;
  const double w21 = v2.dot(u1) / c;
  const double w22 = v2.dot(u2) / c;
  return std::log(std::abs(1.0 + w11)) +
         std::log(std::abs(1.0 + w22 - w12 * w21 / (1.0 + w11))) + D * std::log(c);
}

Matrix RankTwoJacobian::dense() const {
  const auto D = u1.size();
  Matrix J = c * Matrix::Identity(D, D);
  J.noalias() += u1 * v1.transpose();
  J.noalias() += u2 * v2.transpose();
  return J;
}

RankTwoJacobian radial_jacobian(const RayExit& exit, const Vector& direction, double delta,
                                double alpha, double alpha_deriv) {
  // f(x) = x_k + alpha(delta / lambda*) * lambda* * direction. With
  // dlambda*/dx = v1^T (I - dd^T) / delta the Jacobian is
  //   c I + beta1 d v1^T + (alpha' - c - beta1 v1^T d) d d^T,
  // where alpha' is taken with respect to the relative radius, hence the
  // 1/lambda* in beta1.
  const double lam = exit.lambda_star;
  RankTwoJacobian J;
  J.c = alpha * lam / delta;
  J.v1 = exit.gradient();
  J.v2 = direction;
  const double beta1 = alpha / delta - alpha_deriv / lam;
  const double beta2 = alpha_deriv - J.c - beta1 * J.v1.dot(direction);
  J.u1 = beta1 * direction;
  J.u2 = beta2 * direction;
  return J;
}

namespace {

void check_point(const Tessellation& tess, int k, Eigen::Ref<const Vector> p) {
  tess.check_index(k);
  if (p.size() != tess.dim()) throw Error(Errc::ShapeMismatch, "point dimension mismatch");
  if (!p.allFinite()) throw Error(Errc::NonFiniteInput, "point is not finite");
}

// Splits p - x_k into radius and unit direction; at the anchor the direction
// falls back to the first axis.
double polar(const Vector& diff, Vector& direction) {
  const double r = diff.norm();
  if (r > 0.0) {
    direction = diff / r;
  } else {
    direction = Vector::Unit(diff.size(), 0);
  }
  return r;
}

}  // namespace

MapResult forward(const Tessellation& tess, int k, Eigen::Ref<const Vector> x) {
  check_point(tess, k, x);
  const Vector xk = tess.anchor(k);
  const double gamma = tess.scales()[k];

  MapResult out;
  const double raw_delta = polar(x - xk, out.direction);
  const bool at_anchor = raw_delta <= kAnchorEps;
  const double delta = at_anchor ? kAnchorEps : raw_delta;

  const RayExit exit = ray_exit(tess, k, out.direction);
  const double rel = delta / exit.lambda_star;
  const double alpha = squash(rel, gamma);

  out.lambda_star = exit.lambda_star;
  out.active = exit.active;
  out.delta = delta;
  out.delta_star = exit.lambda_star;
  out.alpha_val = alpha;
  out.point = at_anchor ? xk : Vector(xk + (alpha * exit.lambda_star) * out.direction);
  out.logdet =
      radial_jacobian(exit, out.direction, delta, alpha, squash_deriv(rel, gamma)).logdet();
  return out;
}

MapResult inverse(const Tessellation& tess, int k, Eigen::Ref<const Vector> z) {
  check_point(tess, k, z);
  const Vector xk = tess.anchor(k);
  const double gamma = tess.scales()[k];

  MapResult out;
  const double radius = polar(z - xk, out.direction);
  const RayExit exit = ray_exit(tess, k, out.direction);
  const bool at_anchor = radius <= kAnchorEps;

  double alpha = radius / exit.lambda_star;
  if (alpha >= 1.0) {
    if (alpha > 1.0 + 1e-12) throw Error(Errc::PointOutsideCell, "point lies outside the cell");
    throw Error(Errc::AlphaOutOfRange, "point lies on the cell boundary");
  }
  double delta = squash_inv(alpha, gamma) * exit.lambda_star;
  if (at_anchor) {
    delta = kAnchorEps;
    alpha = squash(delta / exit.lambda_star, gamma);
  }
  // d alpha / d rel is the reciprocal of d alpha^{-1} / d alpha.
  const double inv_deriv = 1.0 / (gamma * (1.0 - alpha) * (1.0 - alpha));
  const double alpha_deriv = 1.0 / inv_deriv;

  out.lambda_star = exit.lambda_star;
  out.active = exit.active;
  out.delta = delta;
  out.delta_star = exit.lambda_star;
  out.alpha_val = alpha;
  out.point = at_anchor ? xk : Vector(xk + delta * out.direction);
  out.logdet = -radial_jacobian(exit, out.direction, delta, alpha, alpha_deriv).logdet();
  return out;
}

Matrix dense_jacobian_reference(const Tessellation& tess, int k, Eigen::Ref<const Vector> x) {
  check_point(tess, k, x);
  const Vector xk = tess.anchor(k);
  const double gamma = tess.scales()[k];
  Vector direction;
  const double delta = std::max(polar(x - xk, direction), kAnchorEps);
  const RayExit exit = ray_exit(tess, k, direction);
  const double rel = delta / exit.lambda_star;
  return radial_jacobian(exit, direction, delta, squash(rel, gamma), squash_deriv(rel, gamma))
      .dense();
}

}  // namespace vflow
